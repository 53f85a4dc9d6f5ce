import math

import numpy as np
import pytest

from model_factory import random_instance, random_model
from switchfit import families as fam
from switchfit.data import Trajectory, gen_markov_arx, regressor_matrix
from switchfit.errors import ConfigError, DataError, DomainError
from switchfit.evaluation import (
    PredictionConfig,
    PredictionMode,
    open_loop_predict,
    r2_per_component,
    r2_score,
    recursive_one_step_predict,
    rmse,
    rmse_per_component,
    score_prediction,
    trimmed_mean,
)
from switchfit.likelihood import simulate


L_TRUE = np.array([[0.5, 0.2]])


def _quiet_model():
    """One Gaussian mode ``y' = 0.5 y + 0.2`` with negligible noise."""
    model = random_model(np.random.default_rng(0), d=1)
    beta = fam.from_natural(model.family, L_TRUE, 1e-8 * np.eye(1))
    return model.with_betas([beta])


def test_r2_examples():
    assert r2_score([1.0, 2.0, 3.0], [1.0, 2.0, 4.0]) == pytest.approx(0.5)
    assert r2_score([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
    assert r2_score([1.0, 2.0, 3.0], [2.0, 2.0, 2.0]) == pytest.approx(0.0)
    with pytest.raises(DomainError, match="constant truth"):
        r2_score([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(DomainError, match="at least two samples"):
        r2_score([1.0], [1.0])


def test_r2_stacks_components_around_one_mean():
    truth = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
    pred = np.array([[1.0, 10.0], [2.0, 20.0], [4.0, 30.0]])
    # stacked mean 11: SST = 100 + 81 + 64 + 1 + 81 + 361, SSE = 1
    assert r2_score(truth, pred) == pytest.approx(1.0 - 1.0 / 688.0)
    assert r2_score(truth, truth + 0.5) == pytest.approx(1.0 - 1.5 / 688.0)
    assert r2_score(truth, pred) == pytest.approx(r2_score(truth.ravel(), pred.ravel()))
    assert r2_per_component(truth, pred).tolist() == pytest.approx([0.5, 1.0])


def test_rmse_examples():
    assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(math.sqrt(25.0 / 2.0))
    assert rmse([1.0, 2.0, 3.0], [1.5, 2.5, 3.5]) == pytest.approx(0.5)
    assert rmse_per_component([[0.0, 1.0], [0.0, 1.0]], [[1.0, 1.0], [1.0, 1.0]]).tolist() == [1.0, 0.0]
    with pytest.raises(DomainError, match="differ in shape"):
        rmse([1.0, 2.0], [1.0])


def test_score_prediction_reports_every_metric():
    scores = score_prediction([1.0, 2.0, 3.0], [1.0, 2.0, 4.0])
    assert sorted(scores) == ["r2", "r2_per_component", "rmse", "rmse_per_component"]
    assert scores["r2_per_component"] == pytest.approx([0.5])


def test_trimmed_mean_examples():
    assert trimmed_mean([1.0, 2.0, 100.0], 1.0 / 3.0) == pytest.approx(2.0)
    assert trimmed_mean([1.0, 2.0, 3.0, 4.0], 0.0) == pytest.approx(2.5)
    with pytest.raises(DomainError, match="leaves nothing"):
        trimmed_mean([1.0, 2.0], 0.49)


def test_trimmed_mean_ignores_a_few_wild_samples():
    rng = np.random.default_rng(1)
    samples = rng.normal(size=(500, 3))
    samples[:4] = 1e9
    assert np.all(np.abs(trimmed_mean(samples, 0.01)) < 0.2)


def test_prediction_config_defaults_and_validation():
    assert PredictionConfig().n_samples == 20
    assert PredictionConfig(mode="open-loop").n_samples == 500
    assert PredictionConfig(mode="open-loop").mode is PredictionMode.OPEN_LOOP
    with pytest.raises(ConfigError, match="unknown prediction mode 'closed'"):
        PredictionConfig(mode="closed")
    with pytest.raises(ConfigError, match="'trim_fraction'"):
        PredictionConfig(trim_fraction=0.5)
    with pytest.raises(ConfigError, match="'n_samples'"):
        PredictionConfig(n_samples=0)


def test_recursive_prediction_follows_the_mode_mean():
    model = _quiet_model()
    traj, _ = simulate(model, 30, seed=2)
    pred = recursive_one_step_predict(model, [1.0], traj)
    Z = regressor_matrix(traj, model.cfg)
    assert pred.times.tolist() == list(range(1, 31))
    assert np.allclose(pred.mean, Z @ L_TRUE.T, rtol=0.0, atol=1e-3)
    assert np.all(pred.lower <= pred.upper)


def test_recursive_prediction_is_deterministic_and_causal():
    rng = np.random.default_rng(3)
    model, traj, alpha0 = random_instance(rng, 80, d=3)
    cfg = PredictionConfig(seed=5)
    first = recursive_one_step_predict(model, alpha0, traj, cfg, span=(10, 50))
    again = recursive_one_step_predict(model, alpha0, traj, cfg, span=(10, 50))
    assert np.array_equal(first.mean, again.mean)

    # observations after y_50 cannot influence predictions up to y_50
    altered = traj.y.copy()
    altered[51:] = rng.normal(size=altered[51:].shape) * 100.0
    changed = recursive_one_step_predict(model, alpha0, Trajectory(y=altered, z0=traj.z0), cfg, span=(10, 50))
    assert np.array_equal(first.mean, changed.mean)
    with pytest.raises(DataError, match="exceeds the data"):
        recursive_one_step_predict(model, alpha0, traj, cfg, span=(50, 81))


def test_open_loop_prediction_iterates_the_dynamics():
    model = _quiet_model()
    history, _ = simulate(model, 20, seed=4)
    pred = open_loop_predict(model, [1.0], history, 6, PredictionConfig(mode="open-loop", n_samples=50))
    expected = []
    y = history.y[-1, 0]
    for _ in range(6):
        y = 0.5 * y + 0.2
        expected.append(y)
    assert pred.times.tolist() == list(range(21, 27))
    assert np.allclose(pred.mean[:, 0], expected, rtol=0.0, atol=1e-3)


def test_open_loop_prediction_is_deterministic():
    rng = np.random.default_rng(5)
    model, history, alpha0 = random_instance(rng, 40, d=2)
    cfg = PredictionConfig(mode="open-loop", n_samples=100, seed=7)
    first = open_loop_predict(model, alpha0, history, 10, cfg)
    second = open_loop_predict(model, alpha0, history, 10, cfg)
    assert np.array_equal(first.mean, second.mean)
    assert first.mean.shape == (10, 1)


def test_open_loop_prediction_requires_inputs():
    history, model = gen_markov_arx(60, seed=0)
    alpha0 = np.full(3, 1.0 / 3.0)
    with pytest.raises(DataError, match="supply them"):
        open_loop_predict(model, alpha0, history, 5)
    with pytest.raises(DataError, match="needs 4 input rows"):
        open_loop_predict(model, alpha0, history, 5, inputs=np.zeros((2, 1)))
    with pytest.raises(DataError, match="finite"):
        open_loop_predict(model, alpha0, history, 3, inputs=np.array([[0.1], [np.nan]]))
    pred = open_loop_predict(model, alpha0, history, 5, inputs=np.zeros((4, 1)))
    assert np.all(np.isfinite(pred.mean))
