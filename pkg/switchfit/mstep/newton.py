"""Inner solvers: damped Newton with Armijo backtracking and 1-D l1 minimizers."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Tuple

import numpy as np
from scipy import linalg

from switchfit.errors import ConfigError, SolverWarning


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOptions:
    grad_tol: float = 1e-8
    max_newton_iters: int = 100
    backtrack: float = 0.5
    armijo: float = 1e-4
    laplace_iters: int = 200
    laplace_rel_tol: float = 1e-10

    def __post_init__(self):
        for name in ("grad_tol", "backtrack", "armijo", "laplace_rel_tol"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and 0.0 < value < 1.0):
                raise ConfigError(f"must lie in (0, 1), got {value!r}.", field=f"solver.{name}")
        for name in ("max_newton_iters", "laplace_iters"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}.", field=f"solver.{name}")


class NewtonResult(NamedTuple):
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    exact: bool


def _newton_direction(grad: np.ndarray, hess: np.ndarray) -> np.ndarray:
    try:
        factor = linalg.cho_factor(hess, check_finite=True)
        step = -linalg.cho_solve(factor, grad)
    except (linalg.LinAlgError, ValueError):
        # singular Hessian: minimum-norm step, else steepest descent
        step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
    if not np.all(np.isfinite(step)) or float(grad @ step) >= 0.0:
        step = -grad
    return step


def damped_newton(
    value_fn: Callable[[np.ndarray], float],
    derivatives_fn: Callable[[np.ndarray], Tuple[float, np.ndarray, np.ndarray]],
    x0: np.ndarray,
    opts: SolverOptions,
    label: str = "newton",
) -> NewtonResult:
    """Minimize a convex function from ``x0`` without ever increasing it.

    ``value_fn`` may return ``inf`` outside the domain; such trial points are
    rejected by the line search. Besides ``grad_tol``, the solve is reported
    exact once the Newton decrement falls to round-off level.
    """
    x = np.array(x0, dtype=float)
    value, grad, hess = derivatives_fn(x)
    if not math.isfinite(value):
        raise ValueError(f"{label}: starting point has non-finite objective {value!r}.")
    exact = False
    iterations = 0
    for iterations in range(1, opts.max_newton_iters + 1):
        if np.linalg.norm(grad) <= opts.grad_tol:
            exact = True
            break
        step = _newton_direction(grad, hess)
        slope = float(grad @ step)
        if -slope <= 1e-15 * max(1.0, abs(value)):
            exact = True
            break
        alpha = 1.0
        accepted = False
        while alpha > 1e-12:
            trial = x + alpha * step
            trial_value = value_fn(trial)
            if trial_value <= value + opts.armijo * alpha * slope:
                accepted = True
                break
            alpha *= opts.backtrack
        if not accepted:
            exact = -slope <= 1e-10 * max(1.0, abs(value))
            break
        x = trial
        value, grad, hess = derivatives_fn(x)
    else:
        exact = np.linalg.norm(grad) <= opts.grad_tol

    grad_norm = float(np.linalg.norm(grad))
    if not exact:
        logger.debug("%s stopped after %d iterations with gradient norm %.3e", label, iterations, grad_norm)
        warnings.warn(
            f"{label}: inner solve stopped at gradient norm {grad_norm:.3e} (tolerance {opts.grad_tol:.1e}).",
            SolverWarning,
            stacklevel=3,
        )
    return NewtonResult(x=x, value=float(value), grad_norm=grad_norm, iterations=iterations, exact=bool(exact))


# 1-D piecewise-linear minimizers


def weighted_median_ridge(points: np.ndarray, weights: np.ndarray, ridge: float) -> float:
    """Minimize ``sum_t w_t |b_t - m| + ridge * m**2`` over ``m``.

    With ``ridge == 0`` this is the weighted median; on a flat optimal
    interval the lower end is returned.
    """
    keep = weights > 0.0
    b, w = points[keep], weights[keep]
    if b.size == 0:
        return 0.0
    order = np.argsort(b, kind="stable")
    b, w = b[order], w[order]
    total = w.sum()
    cum = np.cumsum(w)
    # weight of all points <= b_k, duplicates grouped
    upto = cum[np.searchsorted(b, b, side="right") - 1]
    right = 2.0 * ridge * b + 2.0 * upto - total
    hits = np.flatnonzero(right >= 0.0)
    k = int(hits[0]) if hits.size else b.size
    below = cum[k - 1] if k > 0 else 0.0
    if ridge > 0.0:
        m0 = (total - 2.0 * below) / (2.0 * ridge)
        if k == b.size or m0 < b[k]:
            return float(m0)
    return float(b[k])


def positive_scale_l1(
    y: np.ndarray,
    s: np.ndarray,
    weights: np.ndarray,
    log_weight: float,
    linear: float,
) -> float:
    """Minimize ``sum_t w_t |r y_t - s_t| - log_weight * ln r + linear * r`` over ``r > 0``."""
    if log_weight <= 0.0:
        raise ValueError("The log-barrier weight must be positive.")
    keep = (weights > 0.0) & (y != 0.0)
    y, s, w = y[keep], s[keep], weights[keep] * np.abs(y[keep])
    knots = s / y if y.size else np.empty(0)
    nonpos = w[knots <= 0.0].sum()
    pos = knots > 0.0
    p, wp = knots[pos], w[pos]
    order = np.argsort(p, kind="stable")
    p, wp = p[order], wp[order]
    total_pos = wp.sum()
    cum = np.concatenate([[0.0], np.cumsum(wp)])
    # slope of the l1 part plus the linear term on the interval after k knots
    slopes = nonpos + 2.0 * cum - total_pos + linear
    upto = cum[np.searchsorted(p, p, side="right")] if p.size else np.empty(0)
    right = nonpos + 2.0 * upto - total_pos + linear - log_weight / p if p.size else np.empty(0)
    hits = np.flatnonzero(right >= 0.0)
    k = int(hits[0]) if hits.size else p.size
    slope = slopes[k]
    if slope > 0.0:
        r0 = log_weight / slope
        if k == p.size or r0 < p[k]:
            return float(r0)
    if k == p.size:
        raise ValueError("The scale objective is unbounded below.")
    return float(p[k])
