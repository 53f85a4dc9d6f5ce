"""Switching-system model, negative log-likelihood and simulation.

Switching parameters are stored as ``theta`` with shape
``(n_blocks, n_feat, d - 1)``:

================  ==========  ==========  ===================
structure         n_blocks    n_feat      switch features
================  ==========  ==========  ===================
static            1           1           ``[1]``
mode_dependent    d           1           ``[1]``
state_dependent   1           n_z         ``z_t``
full              d           n_z         ``z_t``
================  ==========  ==========  ===================

The logit of the last mode is identically zero. Modes are 0-based.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, logsumexp

from switchfit import families as fam
from switchfit.data import RegressorConfig, Trajectory, regressor_matrix
from switchfit.errors import (
    ConfigError,
    DataError,
    DomainError,
    EnumerationLimitError,
    NumericalError,
)


ENUMERATION_LIMIT = 10**6
SIMPLEX_TOL = 1e-8


class SwitchStructure(Enum):
    STATIC = "static"
    MODE_DEPENDENT = "mode_dependent"
    STATE_DEPENDENT = "state_dependent"
    FULL = "full"

    @classmethod
    def parse(cls, name: str) -> "SwitchStructure":
        key = str(name).strip().lower().replace("-", "_")
        alias = _STRUCTURE_ALIASES.get(key)
        if alias is not None:
            return alias
        try:
            return cls(key)
        except ValueError:
            choices = sorted({s.value for s in cls} | set(_STRUCTURE_ALIASES))
            raise ConfigError(f"unknown switching structure '{name}', expected one of {choices}.", field="structure")

    @property
    def mode_aware(self) -> bool:
        return self in (SwitchStructure.MODE_DEPENDENT, SwitchStructure.FULL)

    @property
    def state_aware(self) -> bool:
        return self in (SwitchStructure.STATE_DEPENDENT, SwitchStructure.FULL)


_STRUCTURE_ALIASES = {
    "only_mode": SwitchStructure.MODE_DEPENDENT,
    "only_state": SwitchStructure.STATE_DEPENDENT,
    "full_dependence": SwitchStructure.FULL,
}


def theta_shape(structure: SwitchStructure, d: int, n_z: int) -> Tuple[int, int, int]:
    return (d if structure.mode_aware else 1, n_z if structure.state_aware else 1, d - 1)


@dataclass(frozen=True, eq=False)
class ModelParams:
    structure: SwitchStructure
    family: fam.FamilyKind
    betas: Tuple[fam.EmissionParams, ...]
    theta: np.ndarray
    cfg: RegressorConfig

    def __post_init__(self):
        betas = tuple(self.betas)
        if not betas:
            raise DomainError("A model needs at least one mode (d >= 1).")
        object.__setattr__(self, "betas", betas)
        for beta in betas:
            fam.validate_params(self.family, beta)
        dims = {(fam.output_dim(self.family, b), fam.regressor_dim(self.family, b)) for b in betas}
        if len(dims) != 1:
            raise DomainError(f"All modes must share emission dimensions, got {sorted(dims)}.")
        theta = np.asarray(self.theta, dtype=float)
        expected = theta_shape(self.structure, self.d, self.n_z)
        if theta.shape != expected:
            raise DomainError(
                f"Switching parameters for structure '{self.structure.value}' must have shape "
                f"{expected}, got {theta.shape}."
            )
        object.__setattr__(self, "theta", theta)

    @property
    def d(self) -> int:
        return len(self.betas)

    @property
    def n_y(self) -> int:
        return fam.output_dim(self.family, self.betas[0])

    @property
    def n_z(self) -> int:
        return fam.regressor_dim(self.family, self.betas[0])

    def with_theta(self, theta: np.ndarray) -> "ModelParams":
        return replace(self, theta=theta)

    def with_betas(self, betas: Sequence[fam.EmissionParams]) -> "ModelParams":
        return replace(self, betas=tuple(betas))


@dataclass(frozen=True)
class Regularizer:
    gamma1: float = 0.0
    gamma2: float = 0.0
    gamma3: float = 0.0

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma3"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0.0):
                raise ConfigError(f"must be a finite non-negative number, got {value!r}.", field=name)

    def switch_value(self, theta: np.ndarray) -> float:
        return 0.5 * self.gamma1 * float(np.sum(theta**2))

    def emission_value(self, family: fam.FamilyKind, beta: fam.EmissionParams) -> float:
        return fam.emission_penalty(family, beta, self.gamma2, self.gamma3)

    def value(self, model: ModelParams) -> float:
        total = self.switch_value(model.theta)
        for beta in model.betas:
            total += self.emission_value(model.family, beta)
        return total


# Switching probabilities


def switch_features(structure: SwitchStructure, Z: np.ndarray) -> np.ndarray:
    if structure.state_aware:
        return Z
    return np.ones((Z.shape[0], 1))


def switch_log_probs(model: ModelParams, Z: np.ndarray) -> np.ndarray:
    """``log p(xi_{t+1} = j | z_t, xi_t = i)`` as an array ``(T, d, d)``."""
    X = switch_features(model.structure, Z)
    logits = np.einsum("tf,bfk->tbk", X, model.theta)
    logits = np.concatenate([logits, np.zeros(logits.shape[:2] + (1,))], axis=2)
    log_p = log_softmax(logits, axis=2)
    if log_p.shape[1] == 1:
        log_p = np.broadcast_to(log_p, (Z.shape[0], model.d, model.d))
    return log_p


def _check_mode(model: ModelParams, i: int) -> None:
    if not 0 <= int(i) < model.d:
        raise DomainError(f"Mode index {i} is outside [0, {model.d}).")


def switch_logits(model: ModelParams, z, i: int) -> np.ndarray:
    """Logits of the next mode given regressor ``z`` and previous mode ``i``."""
    _check_mode(model, i)
    z = np.asarray(z, dtype=float).ravel()
    if z.shape[0] != model.n_z:
        raise DomainError(f"Regressor has {z.shape[0]} entries, expected n_z={model.n_z}.")
    x = z if model.structure.state_aware else np.ones(1)
    block = model.theta[i if model.structure.mode_aware else 0]
    return np.append(x @ block, 0.0)


def unreduced_theta(theta: np.ndarray) -> np.ndarray:
    """Append the implicit zero column of the last mode."""
    return np.concatenate([theta, np.zeros(theta.shape[:2] + (1,))], axis=2)


def reduce_theta(theta_full: np.ndarray) -> np.ndarray:
    """Canonical representative: subtract the last column from every column."""
    return (theta_full - theta_full[:, :, -1:])[:, :, :-1]


def unreduced_switch_probabilities(structure: SwitchStructure, theta_full: np.ndarray, z, i: int) -> np.ndarray:
    z = np.asarray(z, dtype=float).ravel()
    x = z if structure.state_aware else np.ones(1)
    block = theta_full[i if structure.mode_aware else 0]
    logits = x @ block
    return np.exp(logits - logsumexp(logits))


# Emission densities


def emission_log_densities(model: ModelParams, traj: Trajectory, Z: Optional[np.ndarray] = None) -> np.ndarray:
    """``ln p(y_{t+1} | z_t, xi_{t+1} = j)`` as an array ``(T, d)``."""
    if Z is None:
        Z = model_regressors(model, traj)
    Y = traj.y[1:]
    if Y.shape[1] != model.n_y:
        raise DataError(f"Trajectory has n_y={Y.shape[1]} but the model expects n_y={model.n_y}.")
    if model.family.tag == fam.FamilyTag.CATEGORICAL:
        labels = Y[:, 0]
        if np.any(labels != np.round(labels)) or np.any(labels < 0) or np.any(labels >= model.family.n_classes):
            raise DataError(f"Categorical observations must be class indices in [0, {model.family.n_classes}).")
    return np.column_stack([fam.log_density_batch(model.family, beta, Y, Z) for beta in model.betas])


def model_regressors(model: ModelParams, traj: Trajectory) -> np.ndarray:
    Z = regressor_matrix(traj, model.cfg)
    if Z.shape[1] != model.n_z:
        raise DataError(f"Regressor map yields n_z={Z.shape[1]} but the model expects n_z={model.n_z}.")
    return Z


# Forward filter and NLL


def check_alpha0(alpha0, d: int) -> np.ndarray:
    if alpha0 is None:
        return np.full(d, 1.0 / d)
    alpha0 = np.asarray(alpha0, dtype=float).ravel()
    if alpha0.shape[0] != d:
        raise DomainError(f"alpha0 has {alpha0.shape[0]} entries, expected d={d}.")
    if np.any(alpha0 < -SIMPLEX_TOL) or abs(alpha0.sum() - 1.0) > SIMPLEX_TOL:
        raise DomainError("alpha0 must lie on the probability simplex (tolerance 1e-8).")
    alpha0 = np.clip(alpha0, 0.0, None)
    return alpha0 / alpha0.sum()


class FilterResult(NamedTuple):
    # (T + 1, d) filtered log-distributions of xi_t given y_0 .. y_t
    log_alpha: np.ndarray
    # (T, d) one-step predictive log-distributions of xi_{t+1} given y_0 .. y_t
    log_pred: np.ndarray
    # (T,) ln p(y_{t+1} | y_0 .. y_t)
    log_norms: np.ndarray


def run_filter(log_a0: np.ndarray, log_P: np.ndarray, log_e: np.ndarray) -> FilterResult:
    T, d = log_e.shape
    log_alpha = np.empty((T + 1, d))
    log_pred = np.empty((T, d))
    log_norms = np.empty(T)
    log_alpha[0] = log_a0
    for t in range(T):
        log_q = logsumexp(log_alpha[t][:, None] + log_P[t], axis=0)
        a = log_e[t] + log_q
        c = logsumexp(a)
        if not math.isfinite(c):
            raise NumericalError("Forward recursion produced a non-finite normalizer", t=t)
        log_pred[t] = log_q
        log_alpha[t + 1] = a - c
        log_norms[t] = c
    return FilterResult(log_alpha, log_pred, log_norms)


def forward_filter(model: ModelParams, traj: Trajectory, alpha0=None) -> FilterResult:
    alpha0 = check_alpha0(alpha0, model.d)
    Z = model_regressors(model, traj)
    with np.errstate(divide="ignore"):
        log_a0 = np.log(alpha0)
    return run_filter(log_a0, switch_log_probs(model, Z), emission_log_densities(model, traj, Z))


def nll(model: ModelParams, traj: Trajectory, alpha0=None, span: Optional[Tuple[int, int]] = None) -> float:
    """Negative log-likelihood of ``y_{a+1} .. y_b`` for ``span = (a, b)`` (default the whole trajectory).

    The mode distribution is carried through ``y_0 .. y_a`` by the filter; the
    constant ``ln p(z_0)`` is omitted.
    """
    start, stop = (0, traj.T) if span is None else span
    if not 0 <= start < stop <= traj.T:
        raise DataError(f"NLL span ({start}, {stop}) is outside [0, {traj.T}].")
    result = forward_filter(model, traj, alpha0)
    return -float(np.sum(result.log_norms[start:stop]))


def reg_nll(model: ModelParams, traj: Trajectory, reg: Regularizer, alpha0=None, span=None) -> float:
    return nll(model, traj, alpha0, span) + reg.value(model)


# Enumeration oracles


def enumerate_mode_sequences(d: int, T: int) -> np.ndarray:
    if float(d) ** (T + 1) > ENUMERATION_LIMIT:
        raise EnumerationLimitError(
            f"Enumerating d^(T+1) = {d}^{T + 1} mode sequences exceeds the limit of {ENUMERATION_LIMIT}."
        )
    return np.array(list(itertools.product(range(d), repeat=T + 1)), dtype=int).reshape(-1, T + 1)


def log_joint_all(model: ModelParams, traj: Trajectory) -> Tuple[np.ndarray, np.ndarray]:
    """Every mode sequence and its ``log_joint_fixed_modes`` value."""
    seqs = enumerate_mode_sequences(model.d, traj.T)
    Z = model_regressors(model, traj)
    log_e = emission_log_densities(model, traj, Z)
    log_P = switch_log_probs(model, Z)
    t_idx = np.arange(traj.T)
    values = log_e[t_idx, seqs[:, 1:]].sum(axis=1) + log_P[t_idx, seqs[:, :-1], seqs[:, 1:]].sum(axis=1)
    return seqs, values


def log_joint_fixed_modes(model: ModelParams, traj: Trajectory, modes: Sequence[int]) -> float:
    """``sum_t ln p(y_{t+1} | z_t, xi_{t+1}) + ln p(xi_{t+1} | z_t, xi_t)``; the prior on ``xi_0`` is excluded."""
    modes = np.asarray(modes, dtype=int)
    if modes.shape != (traj.T + 1,):
        raise DomainError(f"Mode sequence must have length T+1={traj.T + 1}, got {modes.shape}.")
    if np.any(modes < 0) or np.any(modes >= model.d):
        raise DomainError(f"Mode indices must lie in [0, {model.d}).")
    Z = model_regressors(model, traj)
    log_e = emission_log_densities(model, traj, Z)
    log_P = switch_log_probs(model, Z)
    t_idx = np.arange(traj.T)
    return float(log_e[t_idx, modes[1:]].sum() + log_P[t_idx, modes[:-1], modes[1:]].sum())


def nll_bruteforce(model: ModelParams, traj: Trajectory, alpha0=None) -> float:
    alpha0 = check_alpha0(alpha0, model.d)
    seqs, values = log_joint_all(model, traj)
    with np.errstate(divide="ignore"):
        log_prior = np.log(alpha0)[seqs[:, 0]]
    return -float(logsumexp(values + log_prior))


# Simulation


def _z0_or_default(model: ModelParams, z0) -> np.ndarray:
    if z0 is None:
        z0 = np.zeros(model.n_z)
        if model.cfg.include_bias:
            z0[-1] = 1.0
        return z0
    z0 = np.asarray(z0, dtype=float).ravel()
    if z0.shape[0] != model.n_z:
        raise DataError(f"z0 has {z0.shape[0]} entries, expected n_z={model.n_z}.")
    return z0


def simulate(
    model: ModelParams,
    T: int,
    z0=None,
    alpha0=None,
    seed: Optional[int] = None,
    inputs: Optional[np.ndarray] = None,
) -> Tuple[Trajectory, np.ndarray]:
    """Draw a trajectory ``y_0 .. y_T`` and its modes ``xi_0 .. xi_T``.

    ``y_0`` and ``u_0`` come from the first blocks of ``z0``; ``inputs`` holds
    ``u_0 .. u_T`` (a missing final row is zero-filled) and overrides ``z0``.
    """
    if T < 1:
        raise DataError(f"Simulation horizon must be >= 1, got {T}.")
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    alpha0 = check_alpha0(alpha0, model.d)
    z0 = _z0_or_default(model, z0)
    n_y = model.n_y

    u = None
    n_u = 0
    if inputs is not None:
        u = np.asarray(inputs, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if u.shape[0] == T:
            u = np.vstack([u, np.zeros((1, u.shape[1]))])
        if u.shape[0] < T + 1:
            raise DataError(f"Simulation needs {T + 1} input rows, got {u.shape[0]}.")
        u = u[: T + 1]
        n_u = u.shape[1]
    elif cfg.t_u > 0:
        raise DataError("The model uses exogenous inputs; pass them to simulate().")
    if cfg.n_z(n_y, n_u) != model.n_z:
        raise DataError(f"Inputs give n_z={cfg.n_z(n_y, n_u)} but the model expects n_z={model.n_z}.")

    y_hist = z0[: cfg.t_y * n_y].reshape(cfg.t_y, n_y)
    u_hist = z0[cfg.t_y * n_y : cfg.t_y * n_y + cfg.t_u * n_u].reshape(cfg.t_u, n_u)
    y = np.zeros((T + 1, n_y))
    modes = np.empty(T + 1, dtype=int)
    modes[0] = int(np.searchsorted(np.cumsum(alpha0), rng.uniform(), side="right").clip(0, model.d - 1))
    if cfg.t_y > 0:
        y[0] = y_hist[0]
    else:
        y[0] = fam.sample_emission_batch(model.family, model.betas[modes[0]], z0[None, :], rng)[0]

    def regressor(t: int) -> np.ndarray:
        parts = []
        for k in range(cfg.t_y):
            parts.append(y[t - k] if t - k >= 0 else y_hist[k - t])
        for k in range(cfg.t_u):
            parts.append(u[t - k] if t - k >= 0 else u_hist[k - t])
        if cfg.include_bias:
            parts.append(np.ones(1))
        return np.concatenate(parts)

    for t in range(T):
        z = regressor(t)
        logits = switch_logits(model, z, modes[t])
        probs = np.exp(logits - logsumexp(logits))
        nxt = int(np.searchsorted(np.cumsum(probs), rng.uniform(), side="right"))
        modes[t + 1] = min(nxt, model.d - 1)
        y[t + 1] = fam.sample_emission_batch(model.family, model.betas[modes[t + 1]], z[None, :], rng)[0]

    return Trajectory(y=y, u=u, z0=z0), modes


# Free-coordinate vectors


def model_vector(model: ModelParams) -> np.ndarray:
    """Flatten ``(theta, beta_1 .. beta_d)`` over free coordinates."""
    parts = [model.theta.ravel()]
    parts.extend(fam.params_to_vector(model.family, beta) for beta in model.betas)
    return np.concatenate(parts)


def model_from_vector(model: ModelParams, vec: np.ndarray) -> ModelParams:
    vec = np.asarray(vec, dtype=float)
    k = model.theta.size
    theta = vec[:k].reshape(model.theta.shape)
    betas = []
    for beta in model.betas:
        size = fam.params_to_vector(model.family, beta).shape[0]
        betas.append(fam.params_from_vector(model.family, vec[k : k + size], beta))
        k += size
    if k != vec.shape[0]:
        raise DomainError(f"Parameter vector has {vec.shape[0]} entries, expected {k}.")
    return replace(model, theta=theta, betas=tuple(betas))


def pack_gradient(theta_grad: np.ndarray, beta_grads: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(theta_grad).ravel()] + [np.asarray(g).ravel() for g in beta_grads])
