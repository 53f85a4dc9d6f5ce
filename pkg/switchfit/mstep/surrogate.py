"""Surrogate value and its gradient at the base point."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from switchfit import families as fam
from switchfit.data import Trajectory
from switchfit.errors import DomainError
from switchfit.likelihood import (
    ModelParams,
    Regularizer,
    check_alpha0,
    log_joint_all,
    model_regressors,
    pack_gradient,
)
from switchfit.mstep.emission import emission_objective
from switchfit.mstep.switching import switch_gradient, switch_objective
from switchfit.mstep.weights import SurrogateWeights


def _sequence_entropy(model: ModelParams, traj: Trajectory, alpha0=None) -> float:
    """``sum_xi P(xi | y) ln P(xi | y)`` by enumeration of all mode sequences."""
    alpha0 = check_alpha0(alpha0, model.d)
    seqs, values = log_joint_all(model, traj)
    with np.errstate(divide="ignore"):
        values = values + np.log(alpha0)[seqs[:, 0]]
    log_post = values - logsumexp(values)
    probs = np.exp(log_post)
    return float(np.sum(np.where(probs > 0.0, probs * log_post, 0.0)))


def eval_surrogate(
    model: ModelParams,
    weights: SurrogateWeights,
    traj: Trajectory,
    reg: Regularizer,
    alpha0=None,
    include_constants: bool = False,
) -> float:
    """Surrogate built at ``weights.base_model`` evaluated at ``model``.

    Without constants only the parameter-dependent part is returned. With
    constants the value majorizes ``reg_nll(model)`` and touches it at the base
    point; ``alpha0`` must be the one the weights were built with.
    """
    Z = model_regressors(model, traj)
    Y = traj.y[1:]
    value = switch_objective(model.structure, model.theta, weights, Z, reg.gamma1)
    for j, beta in enumerate(model.betas):
        value += emission_objective(model.family, beta, weights, Y, Z, reg, j)
    if not include_constants:
        return float(value)

    alpha0 = check_alpha0(alpha0, model.d)
    pi0 = weights.initial_weights
    with np.errstate(divide="ignore", invalid="ignore"):
        prior_term = -float(np.sum(np.where(pi0 > 0.0, pi0 * np.log(alpha0), 0.0)))
    entropy = _sequence_entropy(weights.base_model, traj, alpha0)
    log_c = fam.log_normalizer(model.family, model.n_y)
    return float(value + entropy + prior_term - traj.T * log_c + weights.const_offset)


def gradient_mask(model: ModelParams, fixed_covariance: bool = False) -> np.ndarray:
    """Free coordinates of ``model_vector`` that the fit actually moves."""
    parts = [np.ones(model.theta.size, dtype=bool)]
    for beta in model.betas:
        size = fam.params_to_vector(model.family, beta).shape[0]
        mask = np.ones(size, dtype=bool)
        if fixed_covariance and model.family.uses_precision:
            mask[beta.B.size :] = False
        parts.append(mask)
    return np.concatenate(parts)


def surrogate_gradient_at_base(
    model: ModelParams,
    weights: SurrogateWeights,
    traj: Trajectory,
    reg: Regularizer,
) -> np.ndarray:
    """Gradient of the surrogate at its base point, packed like ``model_vector``.

    At the base point this equals the gradient of ``reg_nll``.
    """
    if not model.family.is_smooth:
        raise DomainError(f"Family '{model.family.tag.value}' is not differentiable; no surrogate gradient.")
    Z = model_regressors(model, traj)
    Y = traj.y[1:]
    theta_grad = switch_gradient(model.structure, model.theta, weights, Z, reg.gamma1)
    beta_grads = []
    for j, beta in enumerate(model.betas):
        pi = weights.mode_weights[:, j]
        _, _, dl, dg = fam.ell_g_grads_batch(model.family, beta, Y, Z)
        grad = (pi * weights.lin_coeffs[:, j]) @ dl + pi @ dg
        grad = grad + fam.emission_penalty_grad(model.family, beta, reg.gamma2, reg.gamma3)
        beta_grads.append(grad)
    return pack_gradient(theta_grad, beta_grads)
