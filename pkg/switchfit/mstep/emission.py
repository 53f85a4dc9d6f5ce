"""Per-mode emission updates.

Each solver minimizes ``sum_t pi_t [c_t l_t(beta) + g_t(beta)] + r_2(beta)``
for one mode, with ``pi`` the mode weights and ``c`` the frozen slopes.
"""

from __future__ import annotations

import math
from typing import Tuple

import numpy as np

from switchfit import families as fam
from switchfit.errors import DomainError, NumericalError
from switchfit.likelihood import Regularizer
from switchfit.mstep.newton import (
    SolverOptions,
    damped_newton,
    positive_scale_l1,
    weighted_median_ridge,
)
from switchfit.mstep.switching import softmax_regression
from switchfit.mstep.weights import SurrogateWeights

MIN_MASS = 1e-12


def emission_objective(
    kind: fam.FamilyKind,
    beta: fam.EmissionParams,
    weights: SurrogateWeights,
    Y: np.ndarray,
    Z: np.ndarray,
    reg: Regularizer,
    j: int,
) -> float:
    """Emission part of the surrogate for mode ``j``, regularizer included."""
    pi = weights.mode_weights[:, j]
    ell, g = fam.ell_g_batch(kind, beta, Y, Z)
    value = float(np.sum(pi * (weights.lin_coeffs[:, j] * ell + g)))
    return value + fam.emission_penalty(kind, beta, reg.gamma2, reg.gamma3)


# Gaussian / Student's t


def _precision_step(
    weights: SurrogateWeights,
    Y: np.ndarray,
    Z: np.ndarray,
    gamma2: float,
    gamma3: float,
    j: int,
    beta0: fam.PrecisionParams,
    fixed_lam: bool,
) -> fam.PrecisionParams:
    pi = weights.mode_weights[:, j]
    w = pi * weights.lin_coeffs[:, j]
    mass = float(pi.sum())
    if mass + gamma2 <= MIN_MASS:
        # no data and no covariance prior: only the ridge on B acts
        if gamma3 > 0.0:
            return fam.PrecisionParams(B=np.zeros_like(beta0.B), Lam=beta0.Lam)
        return beta0
    n_z = Z.shape[1]
    gram = (Z * w[:, None]).T @ Z + gamma3 * np.eye(n_z)
    cross = (Y * w[:, None]).T @ Z
    try:
        L = np.linalg.solve(gram, cross.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"Normal equations of mode {j} are singular; use gamma3 > 0 or richer regressors"
        ) from exc
    if fixed_lam:
        return fam.PrecisionParams(B=beta0.Lam @ L, Lam=beta0.Lam)

    R = Y - Z @ L.T
    scatter = (R * w[:, None]).T @ R + gamma3 * (L @ L.T) + gamma2 * np.eye(Y.shape[1])
    cov = fam.symmetrize(scatter / (mass + gamma2))
    try:
        Lam = fam.symmetrize(np.linalg.inv(cov))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Residual scatter of mode {j} is singular; use gamma2 > 0") from exc
    if not np.all(np.isfinite(Lam)) or np.linalg.eigvalsh(Lam)[0] <= 0.0:
        raise NumericalError(f"Precision update of mode {j} is not positive definite; use gamma2 > 0")
    return fam.PrecisionParams(B=Lam @ L, Lam=Lam)


def solve_gaussian_step(
    weights: SurrogateWeights,
    Y: np.ndarray,
    Z: np.ndarray,
    gamma2: float,
    gamma3: float,
    j: int,
    beta0: fam.PrecisionParams,
    fixed_lam: bool = False,
) -> fam.PrecisionParams:
    """Closed-form weighted ridge regression plus covariance update."""
    return _precision_step(weights, Y, Z, gamma2, gamma3, j, beta0, fixed_lam)


def solve_student_t_step(
    weights: SurrogateWeights,
    Y: np.ndarray,
    Z: np.ndarray,
    gamma2: float,
    gamma3: float,
    j: int,
    beta0: fam.PrecisionParams,
    fixed_lam: bool = False,
) -> fam.PrecisionParams:
    """Same closed form; the slopes ``c_t`` act as reweighting of large residuals."""
    return _precision_step(weights, Y, Z, gamma2, gamma3, j, beta0, fixed_lam)


# Laplace


def _laplace_row_objective(a, y, Z, m, r, mass_plus, gamma2, gamma3) -> float:
    return float(np.sum(a * np.abs(r * y - Z @ m)) - mass_plus * math.log(r) + gamma2 * r + gamma3 * (m @ m))


def solve_laplace_step(
    weights: SurrogateWeights,
    Y: np.ndarray,
    Z: np.ndarray,
    gamma2: float,
    gamma3: float,
    j: int,
    opts: SolverOptions,
    beta0: fam.LaplaceParams,
) -> Tuple[fam.LaplaceParams, bool]:
    """Row-wise alternation of coordinate descent on ``m_i`` and an exact ``r_i`` update."""
    pi = weights.mode_weights[:, j]
    a = pi * weights.lin_coeffs[:, j]
    mass_plus = float(pi.sum()) + gamma2
    if mass_plus <= MIN_MASS:
        return beta0, True

    M = beta0.M.copy()
    r = np.diag(beta0.R).copy()
    exact = True
    for i in range(Y.shape[1]):
        y = Y[:, i]
        m = M[i].copy()
        ri = r[i]
        value = _laplace_row_objective(a, y, Z, m, ri, mass_plus, gamma2, gamma3)
        best_m, best_r = m.copy(), ri
        converged = False
        for _ in range(opts.laplace_iters):
            resid = ri * y - Z @ m
            for k in range(Z.shape[1]):
                zk = Z[:, k]
                partial = resid + zk * m[k]
                nz = zk != 0.0
                points = np.zeros_like(partial)
                points[nz] = partial[nz] / zk[nz]
                m_new = weighted_median_ridge(points[nz], (a * np.abs(zk))[nz], gamma3)
                resid = partial - zk * m_new
                m[k] = m_new
            try:
                ri = positive_scale_l1(y, Z @ m, a, mass_plus, gamma2)
            except ValueError as exc:
                raise NumericalError(f"Laplace scale of mode {j}, output {i} has no minimizer") from exc
            new_value = _laplace_row_objective(a, y, Z, m, ri, mass_plus, gamma2, gamma3)
            decrease = value - new_value
            # only non-increasing iterates are kept
            if new_value <= value:
                best_m, best_r, value = m.copy(), ri, new_value
            tol = opts.laplace_rel_tol * max(1.0, abs(value))
            if decrease <= tol:
                converged = decrease >= -tol
                break
        M[i] = best_m
        r[i] = best_r
        exact = exact and converged
    return fam.LaplaceParams(M=M, R=np.diag(r)), exact


# Logistic / Gumbel


def _scalar_derivatives(kind, x, a, pi, y, Z, mass_plus, gamma2, gamma3, need_hess=True):
    b, lam = x[:-1], x[-1]
    if not lam > 0.0:
        return math.inf, None, None
    u = lam * y - Z @ b
    with np.errstate(over="ignore"):
        if kind.tag == fam.FamilyTag.LOGISTIC:
            phi = np.cosh(0.5 * u)
            dphi = 0.5 * np.sinh(0.5 * u)
            ddphi = 0.25 * phi
            lin = 0.0
            dlin = 0.0
        else:
            phi = np.exp(-u)
            dphi = -phi
            ddphi = phi
            lin = pi @ u
            dlin = pi
    bb = float(b @ b)
    value = float(a @ phi) + float(lin) - mass_plus * math.log(lam) + gamma2 * lam + gamma3 * bb / lam
    if not math.isfinite(value) or not need_hess:
        return value, None, None
    coef = a * dphi + dlin
    grad = np.empty_like(x)
    grad[:-1] = -(Z.T @ coef) + 2.0 * gamma3 * b / lam
    grad[-1] = float(coef @ y) - mass_plus / lam + gamma2 - gamma3 * bb / lam**2
    V = np.hstack([-Z, y[:, None]])
    hess = V.T @ ((a * ddphi)[:, None] * V)
    n = b.shape[0]
    hess[:n, :n] += 2.0 * gamma3 / lam * np.eye(n)
    hess[:n, n] += -2.0 * gamma3 * b / lam**2
    hess[n, :n] += -2.0 * gamma3 * b / lam**2
    hess[n, n] += mass_plus / lam**2 + 2.0 * gamma3 * bb / lam**3
    return value, grad, hess


def solve_generic_smooth_step(
    kind: fam.FamilyKind,
    weights: SurrogateWeights,
    Y: np.ndarray,
    Z: np.ndarray,
    reg: Regularizer,
    j: int,
    opts: SolverOptions,
    beta0: fam.EmissionParams,
) -> Tuple[fam.EmissionParams, bool]:
    """Damped Newton on the Logistic, Gumbel or Categorical emission block."""
    pi = weights.mode_weights[:, j]
    if kind.tag == fam.FamilyTag.CATEGORICAL:
        labels = np.zeros((Y.shape[0], kind.n_classes))
        labels[np.arange(Y.shape[0]), Y[:, 0].astype(int)] = pi * weights.lin_coeffs[:, j]
        Theta, exact = softmax_regression(
            Z, labels, beta0.Theta, reg.gamma3, opts, reduced=False, label=f"categorical mode {j}"
        )
        return fam.CategoricalParams(Theta=Theta), exact
    if kind.tag not in (fam.FamilyTag.LOGISTIC, fam.FamilyTag.GUMBEL):
        raise DomainError(f"No Newton emission solver for family '{kind.tag.value}'.")

    a = pi * weights.lin_coeffs[:, j]
    mass_plus = float(pi.sum()) + reg.gamma2
    if mass_plus <= MIN_MASS:
        return beta0, True
    y = Y[:, 0]

    def value_fn(x):
        return _scalar_derivatives(kind, x, a, pi, y, Z, mass_plus, reg.gamma2, reg.gamma3, need_hess=False)[0]

    def derivatives_fn(x):
        return _scalar_derivatives(kind, x, a, pi, y, Z, mass_plus, reg.gamma2, reg.gamma3)

    x0 = fam.params_to_vector(kind, beta0)
    result = damped_newton(value_fn, derivatives_fn, x0, opts, label=f"{kind.tag.value} mode {j}")
    return fam.params_from_vector(kind, result.x, beta0), result.exact


def solve_emission_step(
    kind: fam.FamilyKind,
    weights: SurrogateWeights,
    Y: np.ndarray,
    Z: np.ndarray,
    reg: Regularizer,
    j: int,
    opts: SolverOptions,
    beta0: fam.EmissionParams,
    fixed_covariance: bool = False,
) -> Tuple[fam.EmissionParams, bool]:
    if fixed_covariance and not kind.uses_precision:
        raise DomainError(f"Fixed-covariance fitting needs a gaussian or student_t family, got '{kind.tag.value}'.")
    if kind.tag == fam.FamilyTag.GAUSSIAN:
        return solve_gaussian_step(weights, Y, Z, reg.gamma2, reg.gamma3, j, beta0, fixed_covariance), True
    if kind.tag == fam.FamilyTag.STUDENT_T:
        return solve_student_t_step(weights, Y, Z, reg.gamma2, reg.gamma3, j, beta0, fixed_covariance), True
    if kind.tag == fam.FamilyTag.LAPLACE:
        return solve_laplace_step(weights, Y, Z, reg.gamma2, reg.gamma3, j, opts, beta0)
    return solve_generic_smooth_step(kind, weights, Y, Z, reg, j, opts, beta0)
