"""Prediction procedures and accuracy metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from switchfit import families as fam
from switchfit.data import Trajectory, build_regressor
from switchfit.errors import ConfigError, DataError, DomainError
from switchfit.likelihood import (
    ModelParams,
    check_alpha0,
    forward_filter,
    model_regressors,
    switch_features,
    unreduced_theta,
)
from switchfit.posterior import forward_backward


logger = logging.getLogger(__name__)


class PredictionMode(Enum):
    RECURSIVE = "recursive"
    OPEN_LOOP = "open-loop"


DEFAULT_SAMPLES = {PredictionMode.RECURSIVE: 20, PredictionMode.OPEN_LOOP: 500}


@dataclass(frozen=True)
class PredictionConfig:
    mode: PredictionMode = PredictionMode.RECURSIVE
    n_samples: Optional[int] = None
    trim_fraction: float = 0.01
    horizon: Optional[int] = None
    seed: int = 0
    quantiles: Tuple[float, float] = (0.25, 0.75)

    def __post_init__(self):
        if not isinstance(self.mode, PredictionMode):
            try:
                object.__setattr__(self, "mode", PredictionMode(self.mode))
            except ValueError:
                raise ConfigError(f"unknown prediction mode '{self.mode}'.", field="mode")
        if self.n_samples is None:
            object.__setattr__(self, "n_samples", DEFAULT_SAMPLES[self.mode])
        if isinstance(self.n_samples, bool) or not isinstance(self.n_samples, int) or self.n_samples < 1:
            raise ConfigError(f"must be a positive integer, got {self.n_samples!r}.", field="n_samples")
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ConfigError(f"must lie in [0, 0.5), got {self.trim_fraction!r}.", field="trim_fraction")
        if self.horizon is not None and (not isinstance(self.horizon, int) or self.horizon < 1):
            raise ConfigError(f"must be a positive integer, got {self.horizon!r}.", field="horizon")
        lo, hi = self.quantiles
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"must satisfy 0 <= low <= high <= 1, got {self.quantiles!r}.", field="quantiles")


@dataclass(frozen=True, eq=False)
class Prediction:
    # indices t of the predicted observations y_t
    times: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


# Metrics


def _paired(truth, pred) -> Tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.ndim == 1:
        truth = truth[:, None]
    if pred.ndim == 1:
        pred = pred[:, None]
    if truth.shape != pred.shape:
        raise DomainError(f"Truth {truth.shape} and prediction {pred.shape} differ in shape.")
    if truth.shape[0] == 0:
        raise DomainError("Metrics need at least one sample.")
    return truth, pred


def r2_score(truth, pred) -> float:
    """Single ``1 - SSE / SST`` over the stacked components, centred on one common mean."""
    truth, pred = _paired(truth, pred)
    if truth.shape[0] < 2:
        raise DomainError("R^2 needs at least two samples.")
    flat = truth.ravel()
    sst = float(np.sum((flat - flat.mean()) ** 2))
    if sst == 0.0:
        raise DomainError("R^2 is undefined for a constant truth sequence.")
    return 1.0 - float(np.sum((truth - pred) ** 2)) / sst


def r2_per_component(truth, pred) -> np.ndarray:
    truth, pred = _paired(truth, pred)
    return np.array([r2_score(truth[:, k], pred[:, k]) for k in range(truth.shape[1])])


def rmse(truth, pred) -> float:
    truth, pred = _paired(truth, pred)
    return math.sqrt(float(np.mean((truth - pred) ** 2)))


def rmse_per_component(truth, pred) -> np.ndarray:
    truth, pred = _paired(truth, pred)
    return np.sqrt(np.mean((truth - pred) ** 2, axis=0))


def trimmed_mean(samples, alpha: float) -> np.ndarray:
    """Per-time mean after dropping ``ceil(alpha * m)`` samples on each side (axis 0)."""
    samples = np.asarray(samples, dtype=float)
    m = samples.shape[0]
    if m < 1:
        raise DomainError("trimmed_mean needs at least one sample.")
    if not 0.0 <= alpha < 0.5:
        raise DomainError(f"Trim fraction must lie in [0, 0.5), got {alpha!r}.")
    k = math.ceil(alpha * m - 1e-9)
    if 2 * k >= m:
        raise DomainError(f"Trimming {k} samples per side leaves nothing of {m}.")
    ordered = np.sort(samples, axis=0)
    return ordered[k : m - k].mean(axis=0)


def score_prediction(truth, pred) -> dict:
    return {
        "r2": r2_score(truth, pred),
        "r2_per_component": r2_per_component(truth, pred).tolist(),
        "rmse": rmse(truth, pred),
        "rmse_per_component": rmse_per_component(truth, pred).tolist(),
    }


# Sampling helpers


def _draw_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One index per row of ``probs``."""
    cdf = np.cumsum(probs, axis=-1)
    draws = rng.uniform(size=probs.shape[:-1] + (1,))
    return np.minimum((draws > cdf).sum(axis=-1), probs.shape[-1] - 1)


def _emit(model: ModelParams, modes: np.ndarray, Z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((modes.shape[0], model.n_y))
    for j, beta in enumerate(model.betas):
        rows = np.flatnonzero(modes == j)
        if rows.size:
            out[rows] = fam.sample_emission_batch(model.family, beta, Z[rows], rng)
    return out


def _band(samples: np.ndarray, cfg: PredictionConfig) -> Tuple[np.ndarray, np.ndarray]:
    lower = np.quantile(samples, cfg.quantiles[0], axis=0)
    upper = np.quantile(samples, cfg.quantiles[1], axis=0)
    return lower, upper


# Prediction procedures


def recursive_one_step_predict(
    model: ModelParams,
    alpha0,
    traj: Trajectory,
    cfg: Optional[PredictionConfig] = None,
    span: Optional[Tuple[int, int]] = None,
) -> Prediction:
    """Sample-mean one-step predictions of ``y_{t+1}`` for ``t`` in ``span``.

    Modes are drawn from the filtered one-step predictive distribution, which
    has absorbed the true ``y_0 .. y_t``.
    """
    cfg = cfg or PredictionConfig(mode=PredictionMode.RECURSIVE)
    start, stop = (0, traj.T) if span is None else span
    if not 0 <= start < stop <= traj.T:
        raise DataError(f"Prediction range ({start}, {stop}) exceeds the data [0, {traj.T}].")
    rng = np.random.default_rng(cfg.seed)
    filtered = forward_filter(model, traj, alpha0)
    Z = model_regressors(model, traj)[start:stop]
    q = np.exp(filtered.log_pred[start:stop])
    n = cfg.n_samples
    modes = _draw_categorical(np.repeat(q[:, None, :], n, axis=1), rng)
    Z_rep = np.repeat(Z, n, axis=0)
    samples = _emit(model, modes.ravel(), Z_rep, rng).reshape(stop - start, n, model.n_y)
    samples = np.moveaxis(samples, 1, 0)
    lower, upper = _band(samples, cfg)
    return Prediction(
        times=np.arange(start + 1, stop + 1),
        mean=samples.mean(axis=0),
        lower=lower,
        upper=upper,
    )


def _rollout(
    model: ModelParams,
    z_start: np.ndarray,
    u_known: Optional[np.ndarray],
    mode_probs: np.ndarray,
    horizon: int,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sampled trajectories ``(n_samples, horizon, n_y)`` starting from regressor ``z_start``.

    ``u_known`` holds the inputs ``u_{t+1} ..`` following the start time ``t``.
    """
    mcfg = model.cfg
    n_y = model.n_y
    ny_block = mcfg.t_y * n_y
    n_u = 0 if mcfg.t_u == 0 else (model.n_z - ny_block - (1 if mcfg.include_bias else 0)) // mcfg.t_u
    Zs = np.repeat(z_start[None, :], n_samples, axis=0)
    modes = _draw_categorical(np.repeat(mode_probs[None, :], n_samples, axis=0), rng)
    theta_full = unreduced_theta(model.theta)
    out = np.empty((n_samples, horizon, n_y))
    for k in range(horizon):
        X = switch_features(model.structure, Zs)
        blocks = modes if model.structure.mode_aware else np.zeros(n_samples, dtype=int)
        logits = np.einsum("sf,sfk->sk", X, theta_full[blocks])
        probs = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        modes = _draw_categorical(probs, rng)
        y_next = _emit(model, modes, Zs, rng)
        out[:, k] = y_next
        if k + 1 == horizon:
            break
        new = np.empty_like(Zs)
        if mcfg.t_y > 0:
            new[:, :n_y] = y_next
            new[:, n_y:ny_block] = Zs[:, : ny_block - n_y]
        if mcfg.t_u > 0:
            u_block = slice(ny_block, ny_block + mcfg.t_u * n_u)
            new[:, ny_block : ny_block + n_u] = u_known[k]
            new[:, ny_block + n_u : u_block.stop] = Zs[:, ny_block : u_block.stop - n_u]
        if mcfg.include_bias:
            new[:, -1] = 1.0
        Zs = new
    return out


def open_loop_predict(
    model: ModelParams,
    alpha0,
    history: Trajectory,
    horizon: int,
    cfg: Optional[PredictionConfig] = None,
    inputs: Optional[np.ndarray] = None,
) -> Prediction:
    """Trimmed-mean prediction of ``y_{T+1} .. y_{T+horizon}`` without feedback.

    The initial mode distribution is the smoothed marginal at the end of
    ``history``; ``inputs`` holds ``u_{T+1} .. u_{T+horizon-1}``.
    """
    cfg = cfg or PredictionConfig(mode=PredictionMode.OPEN_LOOP)
    if horizon < 1:
        raise DataError(f"Horizon must be >= 1, got {horizon}.")
    u_known = None
    if model.cfg.t_u > 0:
        if inputs is None:
            raise DataError("The model uses exogenous inputs; supply them for the prediction horizon.")
        u_known = np.asarray(inputs, dtype=float)
        if u_known.ndim == 1:
            u_known = u_known[:, None]
        if u_known.shape[0] < horizon - 1:
            raise DataError(f"Open-loop prediction needs {horizon - 1} input rows, got {u_known.shape[0]}.")
        if not np.all(np.isfinite(u_known[: horizon - 1])):
            raise DataError("Inputs for the prediction horizon must be finite.")
    alpha0 = check_alpha0(alpha0, model.d)
    start_probs = forward_backward(model, history, alpha0).gamma[-1]
    z_start = build_regressor(history, model.cfg, history.T)
    rng = np.random.default_rng(cfg.seed)
    samples = _rollout(model, z_start, u_known, start_probs, horizon, cfg.n_samples, rng)
    lower, upper = _band(samples, cfg)
    logger.info("open-loop rollout of %d samples over %d steps", cfg.n_samples, horizon)
    return Prediction(
        times=np.arange(history.T + 1, history.T + horizon + 1),
        mean=trimmed_mean(samples, cfg.trim_fraction),
        lower=lower,
        upper=upper,
    )
