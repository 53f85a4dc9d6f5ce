"""Smoothed mode posteriors (the E-step)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from switchfit.data import Trajectory
from switchfit.errors import DomainError, NumericalError
from switchfit.likelihood import (
    ModelParams,
    SwitchStructure,
    run_filter,
    check_alpha0,
    emission_log_densities,
    log_joint_all,
    model_regressors,
    switch_log_probs,
)


@dataclass(frozen=True, eq=False)
class Posteriors:
    # (T + 1, d): gamma[t, i] = p(xi_t = i | y)
    gamma: np.ndarray
    # (T, d, d): xi[t, i, j] = p(xi_t = i, xi_{t+1} = j | y)
    xi: np.ndarray
    loglik: float

    @property
    def T(self) -> int:
        return self.xi.shape[0]

    @property
    def d(self) -> int:
        return self.gamma.shape[1]


def _backward(log_P: np.ndarray, log_e: np.ndarray, log_scales: Optional[np.ndarray] = None) -> np.ndarray:
    """Rescaled log backward likelihoods ``log zeta[t, j]`` of ``y_{t+1} .. y_T`` given ``xi_{t+1} = j``.

    Each step is shifted by its maximum; ``log_scales`` adds an arbitrary
    per-step offset on top, which must not change the posteriors.
    """
    T, d = log_e.shape
    log_zeta = np.empty((T, d))
    log_zeta[T - 1] = log_e[T - 1]
    for t in range(T - 1, -1, -1):
        if t < T - 1:
            log_zeta[t] = log_e[t] + logsumexp(log_P[t + 1] + log_zeta[t + 1][None, :], axis=1)
        peak = np.max(log_zeta[t])
        if not math.isfinite(peak):
            raise NumericalError("Backward recursion produced a non-finite value", t=t)
        log_zeta[t] -= peak
        if log_scales is not None:
            log_zeta[t] += log_scales[t]
    return log_zeta


def _combine(log_alpha: np.ndarray, log_P: np.ndarray, log_zeta: np.ndarray) -> np.ndarray:
    rho = log_alpha[:-1, :, None] + log_P + log_zeta[:, None, :]
    norm = logsumexp(rho, axis=(1, 2), keepdims=True)
    if not np.all(np.isfinite(norm)):
        t = int(np.argwhere(~np.isfinite(norm.ravel()))[0, 0])
        raise NumericalError("Pairwise posterior has no mass", t=t)
    return np.exp(rho - norm)


def forward_backward(model: ModelParams, traj: Trajectory, alpha0=None, log_scales: Optional[np.ndarray] = None) -> Posteriors:
    alpha0 = check_alpha0(alpha0, model.d)
    Z = model_regressors(model, traj)
    log_P = switch_log_probs(model, Z)
    log_e = emission_log_densities(model, traj, Z)
    with np.errstate(divide="ignore"):
        log_a0 = np.log(alpha0)
    filtered = run_filter(log_a0, log_P, log_e)
    log_zeta = _backward(log_P, log_e, log_scales)
    xi = _combine(filtered.log_alpha, log_P, log_zeta)
    gamma = np.empty((traj.T + 1, model.d))
    gamma[0] = xi[0].sum(axis=1)
    gamma[1:] = xi.sum(axis=1)
    return Posteriors(gamma=gamma, xi=xi, loglik=float(np.sum(filtered.log_norms)))


def posterior_state_dependent(model: ModelParams, traj: Trajectory, alpha0=None) -> Posteriors:
    """Posteriors when the next mode does not depend on the current one.

    Every ``gamma[t + 1]`` is computed independently from ``y_{t+1}`` and
    ``z_t``; the pairwise marginals factorize.
    """
    if model.structure not in (SwitchStructure.STATIC, SwitchStructure.STATE_DEPENDENT):
        raise DomainError(
            f"The independent-posterior path needs a static or state-dependent structure, got '{model.structure.value}'."
        )
    alpha0 = check_alpha0(alpha0, model.d)
    Z = model_regressors(model, traj)
    log_p = switch_log_probs(model, Z)[:, 0, :]
    a = emission_log_densities(model, traj, Z) + log_p
    norms = logsumexp(a, axis=1, keepdims=True)
    if not np.all(np.isfinite(norms)):
        t = int(np.argwhere(~np.isfinite(norms.ravel()))[0, 0])
        raise NumericalError("Posterior normalizer is not finite", t=t)
    gamma = np.empty((traj.T + 1, model.d))
    gamma[0] = alpha0
    gamma[1:] = np.exp(a - norms)
    xi = gamma[:-1, :, None] * gamma[1:, None, :]
    return Posteriors(gamma=gamma, xi=xi, loglik=float(norms.sum()))


def e_step(model: ModelParams, traj: Trajectory, alpha0=None) -> Posteriors:
    if model.structure in (SwitchStructure.STATIC, SwitchStructure.STATE_DEPENDENT):
        return posterior_state_dependent(model, traj, alpha0)
    return forward_backward(model, traj, alpha0)


def brute_force_posterior(model: ModelParams, traj: Trajectory, alpha0=None) -> Posteriors:
    alpha0 = check_alpha0(alpha0, model.d)
    seqs, values = log_joint_all(model, traj)
    with np.errstate(divide="ignore"):
        values = values + np.log(alpha0)[seqs[:, 0]]
    total = logsumexp(values)
    weights = np.exp(values - total)
    T, d = traj.T, model.d
    gamma = np.zeros((T + 1, d))
    xi = np.zeros((T, d, d))
    for t in range(T + 1):
        np.add.at(gamma[t], seqs[:, t], weights)
    for t in range(T):
        np.add.at(xi[t], (seqs[:, t], seqs[:, t + 1]), weights)
    return Posteriors(gamma=gamma, xi=xi, loglik=float(total))
