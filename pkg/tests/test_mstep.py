import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy import optimize

from model_factory import ALL_FAMILIES, SMOOTH_FAMILIES, random_instance, random_model
from switchfit import families as fam
from switchfit.errors import ConfigError, DomainError, SolverWarning
from switchfit.likelihood import (
    Regularizer,
    SwitchStructure,
    model_from_vector,
    model_regressors,
    model_vector,
    reg_nll,
    theta_shape,
)
from switchfit.mstep import emission
from switchfit.mstep import (
    SolverOptions,
    SurrogateWeights,
    build_weights,
    damped_newton,
    emission_objective,
    eval_surrogate,
    gradient_mask,
    m_step,
    positive_scale_l1,
    softmax_objective,
    softmax_regression,
    solve_emission_step,
    solve_gaussian_step,
    solve_generic_smooth_step,
    solve_laplace_step,
    solve_student_t_step,
    solve_switch_step,
    surrogate_gradient_at_base,
    weighted_median_ridge,
)
from switchfit.posterior import e_step


REG = Regularizer(gamma1=0.1, gamma2=0.1, gamma3=0.1)


def _weights(model, traj, alpha0=None):
    return build_weights(model, e_step(model, traj, alpha0), traj)


@pytest.mark.parametrize("kind", [fam.FamilyKind.gaussian(), fam.FamilyKind.student_t(3.0)], ids=["gaussian", "student_t"])
def test_surrogate_majorizes_and_touches(kind):
    rng = np.random.default_rng(0)
    base, traj, alpha0 = random_instance(rng, 5, kind=kind, d=2)
    weights = _weights(base, traj, alpha0)
    at_base = eval_surrogate(base, weights, traj, REG, alpha0, include_constants=True)
    assert at_base == pytest.approx(reg_nll(base, traj, REG, alpha0), abs=1e-9)
    for _ in range(100):
        other = random_model(rng, kind=kind, d=2)
        gap = eval_surrogate(other, weights, traj, REG, alpha0, include_constants=True) - reg_nll(other, traj, REG, alpha0)
        assert gap >= -1e-9


def test_surrogate_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    h = 1e-6
    for n in range(20):
        kind = SMOOTH_FAMILIES[n % len(SMOOTH_FAMILIES)]
        model, traj, alpha0 = random_instance(rng, 50, kind=kind, d=3, n_y=2)
        grad = surrogate_gradient_at_base(model, _weights(model, traj, alpha0), traj, REG)
        vec = model_vector(model)
        numeric = np.empty_like(vec)
        for k in range(vec.size):
            step = np.zeros_like(vec)
            step[k] = h
            up = reg_nll(model_from_vector(model, vec + step), traj, REG, alpha0)
            down = reg_nll(model_from_vector(model, vec - step), traj, REG, alpha0)
            numeric[k] = (up - down) / (2.0 * h)
        assert np.linalg.norm(grad - numeric) <= 1e-5 * max(1.0, np.linalg.norm(grad))


def test_surrogate_gradient_needs_a_smooth_family():
    model, traj, _ = random_instance(np.random.default_rng(2), 10, kind=fam.FamilyKind.laplace())
    with pytest.raises(DomainError, match="not differentiable"):
        surrogate_gradient_at_base(model, _weights(model, traj), traj, REG)


def test_gradient_mask_freezes_the_precision():
    model = random_model(np.random.default_rng(3), d=2, n_y=2)
    mask = gradient_mask(model, fixed_covariance=True)
    assert mask.size == model_vector(model).size
    # per mode: B has 2 x 3 entries, Lam has 3 free entries
    assert mask.tolist() == [True] * model.theta.size + ([True] * 6 + [False] * 3) * 2
    assert gradient_mask(model).all()


@pytest.mark.parametrize(
    "kind, solver",
    [(fam.FamilyKind.gaussian(), solve_gaussian_step), (fam.FamilyKind.student_t(3.0), solve_student_t_step)],
    ids=["gaussian", "student_t"],
)
def test_closed_form_step_matches_numerical_optimum(kind, solver):
    rng = np.random.default_rng(4)
    for _ in range(100):
        model, traj, alpha0 = random_instance(rng, 30, kind=kind, d=2)
        weights = _weights(model, traj, alpha0)
        Z = model_regressors(model, traj)
        Y = traj.y[1:]
        j = int(rng.integers(2))
        beta0 = model.betas[j]
        closed = solver(weights, Y, Z, REG.gamma2, REG.gamma3, j, beta0)

        def objective(x):
            beta = fam.PrecisionParams(B=x[:-1].reshape(beta0.B.shape), Lam=np.array([[np.exp(x[-1])]]))
            return emission_objective(kind, beta, weights, Y, Z, REG, j)

        x0 = np.append(beta0.B.ravel(), np.log(beta0.Lam[0, 0]))
        oracle = optimize.minimize(objective, x0, method="BFGS", options={"gtol": 1e-10})
        value = emission_objective(kind, closed, weights, Y, Z, REG, j)
        assert value <= oracle.fun + 1e-9
        assert value == pytest.approx(oracle.fun, rel=1e-6, abs=1e-8)


def test_fixed_precision_step_keeps_lam():
    rng = np.random.default_rng(5)
    model, traj, _ = random_instance(rng, 40, d=2, n_y=2)
    weights = _weights(model, traj)
    Z = model_regressors(model, traj)
    beta, exact = solve_emission_step(model.family, weights, traj.y[1:], Z, REG, 0, SolverOptions(), model.betas[0], True)
    assert exact
    assert np.array_equal(beta.Lam, model.betas[0].Lam)
    lap, traj, _ = random_instance(rng, 10, kind=fam.FamilyKind.laplace())
    weights = _weights(lap, traj)
    with pytest.raises(DomainError, match="Fixed-covariance"):
        solve_emission_step(lap.family, weights, traj.y[1:], model_regressors(lap, traj), REG, 0, SolverOptions(), lap.betas[0], True)


def test_weighted_median_ridge_examples():
    assert weighted_median_ridge(np.array([1.0, 2.0, 3.0]), np.ones(3), 0.0) == 2.0
    assert weighted_median_ridge(np.array([1.0, 2.0, 3.0]), np.array([1.0, 1.0, 5.0]), 0.0) == 3.0
    # flat optimum: lower end
    assert weighted_median_ridge(np.array([1.0, 2.0]), np.ones(2), 0.0) == 1.0
    assert weighted_median_ridge(np.array([1.0]), np.zeros(1), 0.5) == 0.0


def test_weighted_median_ridge_is_optimal():
    rng = np.random.default_rng(6)
    grid = np.linspace(-6.0, 6.0, 24001)
    for _ in range(50):
        points = rng.normal(size=7)
        weights = rng.uniform(0.0, 2.0, size=7)
        ridge = float(rng.choice([0.0, 0.3, 3.0]))

        def objective(m):
            return np.sum(weights * np.abs(points - np.atleast_1d(m)[:, None]), axis=1) + ridge * np.atleast_1d(m) ** 2

        best = weighted_median_ridge(points, weights, ridge)
        assert objective(best)[0] <= objective(grid).min() + 1e-9


def test_positive_scale_l1_is_optimal():
    rng = np.random.default_rng(7)
    grid = np.logspace(-4.0, 3.0, 40001)
    for _ in range(50):
        y = rng.normal(size=8)
        s = rng.normal(size=8)
        w = rng.uniform(0.1, 1.0, size=8)
        log_weight = float(rng.uniform(0.5, 3.0))
        linear = float(rng.choice([0.0, 0.5]))

        def objective(r):
            r = np.atleast_1d(r)
            return np.sum(w * np.abs(r[:, None] * y - s), axis=1) - log_weight * np.log(r) + linear * r

        best = positive_scale_l1(y, s, w, log_weight, linear)
        assert best > 0.0
        assert objective(best)[0] <= objective(grid).min() + 1e-9
    with pytest.raises(ValueError, match="positive"):
        positive_scale_l1(np.ones(2), np.ones(2), np.ones(2), 0.0, 0.0)


def test_softmax_regression_matches_numerical_optimum():
    rng = np.random.default_rng(8)
    for _ in range(20):
        X = np.hstack([rng.normal(size=(40, 2)), np.ones((40, 1))])
        labels = rng.dirichlet(np.ones(3), size=40) * rng.uniform(0.0, 1.0, size=(40, 1))
        theta0 = np.zeros((3, 2))
        theta, exact = softmax_regression(X, labels, theta0, 0.1, SolverOptions())
        assert exact
        oracle = optimize.minimize(
            lambda v: softmax_objective(v.reshape(3, 2), X, labels, 0.1), theta0.ravel(), method="BFGS", options={"gtol": 1e-10}
        )
        assert softmax_objective(theta, X, labels, 0.1) <= oracle.fun + 1e-9


def test_damped_newton_minimizes_a_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, -1.0])

    def derivatives(x):
        return 0.5 * x @ A @ x - b @ x, A @ x - b, A

    result = damped_newton(lambda x: derivatives(x)[0], derivatives, np.zeros(2), SolverOptions())
    assert result.exact
    assert np.allclose(result.x, np.linalg.solve(A, b), rtol=0.0, atol=1e-12)


def test_damped_newton_warns_when_the_budget_runs_out():
    def derivatives(x):
        return float(np.sum(np.exp(x) - x)), np.exp(x) - 1.0, np.diag(np.exp(x))

    with pytest.warns(SolverWarning, match="inner solve stopped"):
        result = damped_newton(lambda x: derivatives(x)[0], derivatives, np.full(2, 30.0), SolverOptions(max_newton_iters=2))
    assert not result.exact


def test_solver_options_validation():
    with pytest.raises(ConfigError, match="solver.backtrack"):
        SolverOptions(backtrack=1.5)
    with pytest.raises(ConfigError, match="solver.max_newton_iters"):
        SolverOptions(max_newton_iters=0)


def test_laplace_step_never_increases_its_objective():
    rng = np.random.default_rng(9)
    kind = fam.FamilyKind.laplace()
    for _ in range(10):
        model, traj, _ = random_instance(rng, 40, kind=kind, d=2)
        weights = _weights(model, traj)
        Z = model_regressors(model, traj)
        Y = traj.y[1:]
        for j in range(2):
            beta, _ = solve_laplace_step(weights, Y, Z, REG.gamma2, REG.gamma3, j, SolverOptions(), model.betas[j])
            before = emission_objective(kind, model.betas[j], weights, Y, Z, REG, j)
            assert emission_objective(kind, beta, weights, Y, Z, REG, j) <= before


@pytest.mark.parametrize("kind", ALL_FAMILIES, ids=lambda k: k.tag.value)
def test_m_step_decreases_the_regularized_nll(kind):
    rng = np.random.default_rng(10)
    model, traj, alpha0 = random_instance(rng, 60, kind=kind, d=2)
    weights = _weights(model, traj, alpha0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SolverWarning)
        updated, _ = m_step(model, weights, traj, REG)
    assert eval_surrogate(updated, weights, traj, REG) <= eval_surrogate(model, weights, traj, REG) + 1e-9
    before = reg_nll(model, traj, REG, alpha0)
    assert reg_nll(updated, traj, REG, alpha0) <= before + 1e-8


def _switch_weights(xi):
    """Weights carrying only the pairwise posteriors, enough for the switching update."""
    T, d, _ = xi.shape
    return SurrogateWeights(
        xi_weights=xi,
        mode_weights=xi.sum(axis=1),
        initial_weights=xi[0].sum(axis=1),
        lin_coeffs=np.ones((T, d)),
        base_ell=np.zeros((T, d)),
        const_offset=0.0,
        base_model=None,
    )


def test_switch_step_single_soft_label_gives_log_odds():
    xi = np.array([[[0.4, 0.1], [0.4, 0.1]]])
    theta, exact = solve_switch_step(
        SwitchStructure.STATE_DEPENDENT, _switch_weights(xi), np.ones((1, 1)), 0.0, SolverOptions(), np.zeros((1, 1, 1))
    )
    assert exact
    assert theta[0, 0, 0] == pytest.approx(math.log(4.0), abs=1e-6)


def test_switch_step_uniform_labels_give_zero_parameters():
    rng = np.random.default_rng(11)
    d, T = 3, 30
    Z = np.hstack([rng.standard_normal((T, 2)), np.ones((T, 1))])
    xi = np.full((T, d, d), 1.0 / d**2)
    theta0 = rng.standard_normal(theta_shape(SwitchStructure.FULL, d, Z.shape[1]))
    theta, _ = solve_switch_step(SwitchStructure.FULL, _switch_weights(xi), Z, 0.1, SolverOptions(), theta0)
    assert np.allclose(theta, 0.0, atol=1e-6)


def test_switch_step_decouples_across_previous_modes():
    rng = np.random.default_rng(12)
    d, T = 3, 40
    Z = np.hstack([rng.standard_normal((T, 1)), np.ones((T, 1))])
    xi = rng.dirichlet(np.ones(d * d), size=T).reshape(T, d, d)
    theta0 = np.zeros(theta_shape(SwitchStructure.FULL, d, Z.shape[1]))
    base, _ = solve_switch_step(SwitchStructure.FULL, _switch_weights(xi), Z, 0.1, SolverOptions(), theta0)

    perturbed = xi.copy()
    perturbed[:, 1, :] = perturbed[:, 1, ::-1]
    moved, _ = solve_switch_step(SwitchStructure.FULL, _switch_weights(perturbed), Z, 0.1, SolverOptions(), theta0)
    assert np.array_equal(moved[0], base[0])
    assert np.array_equal(moved[2], base[2])
    assert not np.allclose(moved[1], base[1])


NEWTON_FAMILIES = [fam.FamilyKind.logistic(), fam.FamilyKind.gumbel(), fam.FamilyKind.categorical(3)]


def _newton_oracle(kind, beta0, weights, Y, Z, j):
    if kind.tag == fam.FamilyTag.CATEGORICAL:
        def objective(x):
            return emission_objective(kind, fam.CategoricalParams(Theta=x.reshape(beta0.Theta.shape)), weights, Y, Z, REG, j)

        x0 = beta0.Theta.ravel()
    else:
        def objective(x):
            beta = fam.params_from_vector(kind, np.append(x[:-1], np.exp(x[-1])), beta0)
            return emission_objective(kind, beta, weights, Y, Z, REG, j)

        x0 = np.append(beta0.b, np.log(beta0.lam))
    return optimize.minimize(objective, x0, method="BFGS", options={"gtol": 1e-10})


@pytest.mark.parametrize("kind", NEWTON_FAMILIES, ids=lambda k: k.tag.value)
def test_newton_emission_step_matches_numerical_optimum(kind):
    rng = np.random.default_rng(13)
    for _ in range(20):
        model, traj, alpha0 = random_instance(rng, 40, kind=kind, d=2)
        weights = _weights(model, traj, alpha0)
        Z = model_regressors(model, traj)
        Y = traj.y[1:]
        j = int(rng.integers(2))
        beta, _ = solve_generic_smooth_step(kind, weights, Y, Z, REG, j, SolverOptions(), model.betas[j])
        oracle = _newton_oracle(kind, model.betas[j], weights, Y, Z, j)
        value = emission_objective(kind, beta, weights, Y, Z, REG, j)
        assert value <= oracle.fun + 1e-9
        assert value == pytest.approx(oracle.fun, rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("kind", NEWTON_FAMILIES, ids=lambda k: k.tag.value)
def test_newton_emission_step_ignores_zero_weight_samples(kind):
    rng = np.random.default_rng(14)
    model, traj, alpha0 = random_instance(rng, 50, kind=kind, d=2)
    weights = _weights(model, traj, alpha0)
    Z = model_regressors(model, traj)
    Y = traj.y[1:]
    drop = rng.random(traj.T) < 0.3
    mode_weights = weights.mode_weights.copy()
    mode_weights[drop, 0] = 0.0
    zeroed = replace(weights, mode_weights=mode_weights)
    keep = ~drop
    trimmed = replace(
        weights,
        xi_weights=weights.xi_weights[keep],
        mode_weights=mode_weights[keep],
        lin_coeffs=weights.lin_coeffs[keep],
        base_ell=weights.base_ell[keep],
    )
    full, _ = solve_generic_smooth_step(kind, zeroed, Y, Z, REG, 0, SolverOptions(), model.betas[0])
    reduced, _ = solve_generic_smooth_step(kind, trimmed, Y[keep], Z[keep], REG, 0, SolverOptions(), model.betas[0])
    assert np.allclose(fam.params_to_vector(kind, full), fam.params_to_vector(kind, reduced), rtol=0.0, atol=1e-8)


def test_laplace_step_rejects_an_increasing_iterate(monkeypatch):
    kind = fam.FamilyKind.laplace()
    model, traj, _ = random_instance(np.random.default_rng(15), 40, kind=kind, d=2)
    weights = _weights(model, traj)
    Z = model_regressors(model, traj)
    Y = traj.y[1:]
    # a scale far from its minimizer makes the first sweep increase the objective
    monkeypatch.setattr(emission, "positive_scale_l1", lambda *args: 50.0)
    beta, exact = solve_laplace_step(weights, Y, Z, REG.gamma2, REG.gamma3, 0, SolverOptions(), model.betas[0])
    assert not exact
    assert np.array_equal(beta.M, model.betas[0].M)
    assert np.array_equal(beta.R, model.betas[0].R)
