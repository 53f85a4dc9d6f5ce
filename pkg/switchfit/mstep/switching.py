"""Switching update: weighted soft-label softmax regression with a ridge."""

from __future__ import annotations

from typing import Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from switchfit.likelihood import SwitchStructure, switch_features
from switchfit.mstep.newton import SolverOptions, damped_newton
from switchfit.mstep.weights import SurrogateWeights


def _logits(theta: np.ndarray, X: np.ndarray, reduced: bool) -> np.ndarray:
    A = X @ theta
    if reduced:
        A = np.hstack([A, np.zeros((A.shape[0], 1))])
    return A


def softmax_objective(theta: np.ndarray, X: np.ndarray, labels: np.ndarray, ridge: float, reduced: bool = True) -> float:
    """``sum_t [s_t lse(a_t) - labels_t . a_t] + ridge/2 |theta|^2`` with ``s_t = sum labels_t``."""
    A = _logits(theta, X, reduced)
    s = labels.sum(axis=1)
    return float(s @ logsumexp(A, axis=1) - np.sum(labels * A) + 0.5 * ridge * np.sum(theta**2))


def softmax_gradient(theta: np.ndarray, X: np.ndarray, labels: np.ndarray, ridge: float, reduced: bool = True) -> np.ndarray:
    A = _logits(theta, X, reduced)
    s = labels.sum(axis=1)
    G = X.T @ (s[:, None] * softmax(A, axis=1) - labels)
    return G[:, : theta.shape[1]] + ridge * theta


def _softmax_derivatives(theta, X, labels, ridge, reduced):
    A = _logits(theta, X, reduced)
    s = labels.sum(axis=1)
    P = softmax(A, axis=1)
    value = float(s @ logsumexp(A, axis=1) - np.sum(labels * A) + 0.5 * ridge * np.sum(theta**2))
    n_feat, n_free = theta.shape
    grad = (X.T @ (s[:, None] * P - labels))[:, :n_free] + ridge * theta
    hess = np.zeros((n_feat, n_free, n_feat, n_free))
    for k in range(n_free):
        for l in range(k, n_free):
            c = s * (P[:, k] * ((k == l) - P[:, l]))
            block = X.T @ (c[:, None] * X)
            hess[:, k, :, l] = block
            hess[:, l, :, k] = block.T
    hess = hess.reshape(n_feat * n_free, n_feat * n_free)
    hess += ridge * np.eye(n_feat * n_free)
    return value, grad.ravel(), hess


def softmax_regression(
    X: np.ndarray,
    labels: np.ndarray,
    theta0: np.ndarray,
    ridge: float,
    opts: SolverOptions,
    reduced: bool = True,
    label: str = "softmax regression",
) -> Tuple[np.ndarray, bool]:
    """Weighted multinomial regression from ``theta0``; the result never scores worse."""
    active = labels.sum(axis=1) > 0.0
    X, labels = X[active], labels[active]
    shape = theta0.shape
    if theta0.size == 0:
        return theta0.copy(), True

    def value_fn(vec):
        return softmax_objective(vec.reshape(shape), X, labels, ridge, reduced)

    def derivatives_fn(vec):
        return _softmax_derivatives(vec.reshape(shape), X, labels, ridge, reduced)

    result = damped_newton(value_fn, derivatives_fn, theta0.ravel(), opts, label=label)
    return result.x.reshape(shape), result.exact


def _block_labels(structure: SwitchStructure, weights: SurrogateWeights):
    """``(block index, soft labels)`` pairs of the decoupled problems."""
    if structure.mode_aware:
        return [(i, weights.xi_weights[:, i, :]) for i in range(weights.d)]
    return [(0, weights.mode_weights)]


def switch_objective(structure: SwitchStructure, theta: np.ndarray, weights: SurrogateWeights, Z: np.ndarray, gamma1: float) -> float:
    """Switching part of the surrogate plus its ridge."""
    X = switch_features(structure, Z)
    return sum(softmax_objective(theta[b], X, labels, gamma1) for b, labels in _block_labels(structure, weights))


def switch_gradient(structure: SwitchStructure, theta: np.ndarray, weights: SurrogateWeights, Z: np.ndarray, gamma1: float) -> np.ndarray:
    X = switch_features(structure, Z)
    grad = np.zeros_like(theta)
    for b, labels in _block_labels(structure, weights):
        grad[b] = softmax_gradient(theta[b], X, labels, gamma1)
    return grad


def solve_switch_step(
    structure: SwitchStructure,
    weights: SurrogateWeights,
    Z: np.ndarray,
    gamma1: float,
    opts: SolverOptions,
    theta0: np.ndarray,
) -> Tuple[np.ndarray, bool]:
    """Minimize the switching surrogate block by block, starting from ``theta0``."""
    if weights.d == 1:
        return theta0.copy(), True
    X = switch_features(structure, Z)
    theta = theta0.copy()
    exact = True
    for b, labels in _block_labels(structure, weights):
        theta[b], ok = softmax_regression(X, labels, theta0[b], gamma1, opts, label=f"switching block {b}")
        exact = exact and ok
    return theta, exact
