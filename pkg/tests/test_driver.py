import warnings
from dataclasses import replace

import numpy as np
import pytest

from model_factory import ALL_FAMILIES, random_instance
from switchfit import driver, posterior
from switchfit import families as fam
from switchfit.data import DatasetSplit, RegressorConfig
from switchfit.driver import (
    FitOptions,
    ModelSkeleton,
    StopReason,
    fit,
    grid_fit,
    initialize,
    multistart_fit,
)
from switchfit.errors import ConfigError, DomainError, MonotonicityError, SolverWarning
from switchfit.likelihood import Regularizer, SwitchStructure, model_from_vector, model_vector, reg_nll


REG = Regularizer(gamma1=0.1, gamma2=0.1, gamma3=0.1)


def _skeleton(model):
    return ModelSkeleton(structure=model.structure, family=model.family, d=model.d, cfg=model.cfg)


def test_fit_options_validation():
    with pytest.raises(ConfigError, match="'max_iters'"):
        FitOptions(max_iters=0)
    with pytest.raises(ConfigError, match="'grad_stop'"):
        FitOptions(grad_stop=-1.0)
    with pytest.raises(ConfigError, match="'seed'"):
        FitOptions(seed=True)
    with pytest.raises(ConfigError, match="'modes'"):
        ModelSkeleton(SwitchStructure.FULL, fam.FamilyKind.gaussian(), 0, RegressorConfig())


def _offset_e_step(monkeypatch, shift, increase):
    """Shift the log-likelihood by ``shift``; every E-step after the first raises reg_nll by ``increase``."""
    calls = []

    def shifted(model, traj, alpha0=None):
        post = posterior.e_step(model, traj, alpha0)
        offset = shift - (increase if calls else 0.0)
        calls.append(offset)
        return replace(post, loglik=post.loglik + offset)

    monkeypatch.setattr(driver, "e_step", shifted)
    monkeypatch.setattr(driver, "m_step", lambda model, *args, **kwargs: (model, True))


def test_monotonicity_slack_is_absolute_for_large_values(monkeypatch):
    # state-dependent posteriors keep alpha0, so the true log-likelihood repeats
    model, traj, alpha0 = random_instance(np.random.default_rng(11), 40, d=2, structure=SwitchStructure.STATE_DEPENDENT)
    _offset_e_step(monkeypatch, 1e6, 1e-6)
    with pytest.raises(MonotonicityError, match="increased"):
        fit(model, alpha0, traj, REG, FitOptions(max_iters=3, grad_stop=1e-300))


def test_increase_within_the_slack_is_tolerated(monkeypatch):
    model, traj, alpha0 = random_instance(np.random.default_rng(11), 40, d=2, structure=SwitchStructure.STATE_DEPENDENT)
    _offset_e_step(monkeypatch, 1e6, 1e-9)
    report = fit(model, alpha0, traj, REG, FitOptions(max_iters=3, grad_stop=1e-300))
    assert report.n_iterations == 1
    assert report.stop_reason is StopReason.REL_DECREASE


def test_initialize_is_deterministic():
    rng = np.random.default_rng(0)
    model, traj, _ = random_instance(rng, 50, d=3)
    first, alpha_a = initialize(_skeleton(model), traj, seed=4)
    second, alpha_b = initialize(_skeleton(model), traj, seed=4)
    assert np.array_equal(first.theta, second.theta)
    assert np.array_equal(alpha_a, alpha_b)
    assert alpha_a.sum() == pytest.approx(1.0)
    assert first.d == 3


def test_initialize_rejects_fixed_precision_for_laplace():
    model, traj, _ = random_instance(np.random.default_rng(1), 30, kind=fam.FamilyKind.laplace())
    with pytest.raises(DomainError, match="fixed precision"):
        initialize(_skeleton(model), traj, seed=0, fixed_precision=np.eye(1))


def test_single_mode_reaches_the_closed_form_in_one_iteration():
    rng = np.random.default_rng(2)
    model, traj, _ = random_instance(rng, 200, d=1, n_y=2)
    # start from the generating parameters, away from the maximum-likelihood point
    report = fit(model, [1.0], traj, Regularizer(), FitOptions(max_iters=5, grad_stop=1e-300))
    assert report.n_iterations >= 2
    assert report.iterations[1].param_delta <= 1e-10
    assert report.stop_reason is StopReason.REL_DECREASE


@pytest.mark.parametrize("kind", ALL_FAMILIES, ids=lambda k: k.tag.value)
def test_fit_history_is_monotone(kind):
    rng = np.random.default_rng(3)
    model, traj, _ = random_instance(rng, 150, kind=kind, d=2)
    model0, alpha0 = initialize(_skeleton(model), traj, seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SolverWarning)
        report = fit(model0, alpha0, traj, REG, FitOptions(max_iters=30))
    history = report.reg_nll_history
    assert len(history) == report.n_iterations + 1
    for before, after in zip(history, history[1:]):
        assert after <= before + 1e-8
    assert history[-1] == pytest.approx(reg_nll(report.model, traj, REG, report.alpha0), rel=1e-12)
    if not kind.is_smooth:
        assert report.final_grad_norm is None
        assert report.stop_reason is not StopReason.GRADIENT


def test_fixed_covariance_keeps_the_precision():
    rng = np.random.default_rng(4)
    model, traj, _ = random_instance(rng, 120, d=2, n_y=2)
    Lam = np.array([[4.0, 1.0], [1.0, 3.0]])
    model0, alpha0 = initialize(_skeleton(model), traj, seed=2, fixed_precision=Lam)
    report = fit(model0, alpha0, traj, REG, FitOptions(max_iters=10, fixed_covariance=True))
    for beta in report.model.betas:
        assert np.array_equal(beta.Lam, Lam)

    laplace, traj, _ = random_instance(rng, 30, kind=fam.FamilyKind.laplace())
    model0, alpha0 = initialize(_skeleton(laplace), traj, seed=0)
    with pytest.raises(DomainError, match="Fixed-covariance"):
        fit(model0, alpha0, traj, REG, FitOptions(fixed_covariance=True))


def test_more_restarts_never_score_worse():
    rng = np.random.default_rng(5)
    model, traj, _ = random_instance(rng, 150, d=2)
    single = multistart_fit(_skeleton(model), traj, REG, FitOptions(max_iters=40, n_restarts=1, seed=9))
    many = multistart_fit(_skeleton(model), traj, REG, FitOptions(max_iters=40, n_restarts=20, seed=9))
    assert many.final_reg_nll <= single.final_reg_nll
    assert len(many.restarts) == 20
    assert many.restarts[many.best_restart].reg_nll == many.final_reg_nll
    assert many.restarts[0].seed == single.restarts[0].seed


def test_parallel_restarts_match_sequential():
    rng = np.random.default_rng(6)
    model, traj, _ = random_instance(rng, 100, d=2)
    opts = FitOptions(max_iters=15, n_restarts=4, seed=3)
    sequential = multistart_fit(_skeleton(model), traj, REG, opts)
    parallel = multistart_fit(_skeleton(model), traj, REG, FitOptions(max_iters=15, n_restarts=4, seed=3, n_workers=2))
    assert parallel.final_reg_nll == sequential.final_reg_nll
    assert parallel.best_restart == sequential.best_restart


def test_split_fits_on_training_and_scores_validation():
    rng = np.random.default_rng(7)
    model, traj, _ = random_instance(rng, 200, d=2)
    split = DatasetSplit(train=(0, 120), validation=(120, 200))
    report = multistart_fit(_skeleton(model), traj, REG, FitOptions(max_iters=20, n_restarts=3), split)
    assert report.validation_nll == pytest.approx(
        reg_nll(report.model, traj, REG, report.alpha0, span=(120, 200)), rel=1e-12
    )
    assert all(s.validation_nll is not None for s in report.restarts)


def test_grid_fit_keeps_the_best_regularizer():
    rng = np.random.default_rng(8)
    model, traj, _ = random_instance(rng, 160, d=2)
    split = DatasetSplit(train=(0, 100), validation=(100, 160))
    regs = [Regularizer(gamma1=0.01, gamma2=0.01, gamma3=0.01), Regularizer(gamma1=10.0, gamma2=10.0, gamma3=10.0)]
    report = grid_fit(_skeleton(model), traj, regs, FitOptions(max_iters=20, n_restarts=2), split)
    assert len(report.grid) == 2
    scores = [entry["score"] for entry in report.grid]
    assert report.reg == regs[int(np.argmin(scores))]
    with pytest.raises(ConfigError, match="at least one regularizer"):
        grid_fit(_skeleton(model), traj, [])


def test_alpha0_becomes_the_smoothed_initial_marginal():
    rng = np.random.default_rng(9)
    model, traj, alpha0 = random_instance(rng, 80, d=3)
    opts = FitOptions(max_iters=1, grad_stop=1e-300)
    first = fit(model, alpha0, traj, REG, opts)
    assert np.allclose(first.alpha0, posterior.forward_backward(model, traj, alpha0).gamma[0], atol=1e-12)

    second = fit(first.model, first.alpha0, traj, REG, opts)
    expected = posterior.forward_backward(first.model, traj, first.alpha0).gamma[0]
    assert np.allclose(second.alpha0, expected, atol=1e-12)
    assert second.alpha0.sum() == pytest.approx(1.0)


def test_gradient_stop_is_a_stationary_point():
    rng = np.random.default_rng(10)
    model, traj, alpha0 = random_instance(rng, 60, d=2)
    grad_stop = 1e-3
    report = fit(model, alpha0, traj, REG, FitOptions(max_iters=3000, grad_stop=grad_stop, rel_decrease_stop=1e-300))
    assert report.stop_reason is StopReason.GRADIENT
    assert report.final_grad_norm <= grad_stop

    h = 1e-6
    vec = model_vector(report.model)
    numeric = np.empty_like(vec)
    for k in range(vec.size):
        step = np.zeros_like(vec)
        step[k] = h
        up = reg_nll(model_from_vector(report.model, vec + step), traj, REG, report.alpha0)
        down = reg_nll(model_from_vector(report.model, vec - step), traj, REG, report.alpha0)
        numeric[k] = (up - down) / (2.0 * h)
    assert np.linalg.norm(numeric) <= 2.0 * grad_stop
