"""Emission families ``p(y | z) = C exp(-f(l(y, z, beta)) - g(y, z, beta))``.

Every family is described by a concave, increasing ``f``, and by ``l`` and
``g`` that are convex in the parameters. Parameters are stored in the
transformed coordinates in which ``l`` and ``g`` are convex:

=============  =====================  ==================================
family         parameters             natural parameters
=============  =====================  ==================================
gaussian       ``B``, ``Lam``         ``L = Lam^-1 B``, ``Sigma = Lam^-1``
student_t      ``B``, ``Lam``         same as gaussian, ``nu`` fixed
laplace        ``M``, ``R`` diagonal  ``L = R^-1 M``, ``Sigma = R^-2``
logistic       ``b``, ``lam``         ``a = b / lam``, ``scale = 1 / lam``
gumbel         ``b``, ``lam``         same as logistic
categorical    ``Theta``              class probabilities ``softmax(Theta^T z)``
=============  =====================  ==================================

Batched helpers take ``Y`` of shape ``(m, n_y)`` and ``Z`` of shape
``(m, n_z)``; categorical observations hold the class index in ``Y[:, 0]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import gammaln, logsumexp, softmax

from switchfit.errors import DomainError


SQRT2 = math.sqrt(2.0)
DOMAIN_MARGIN = 1e-12


class FamilyTag(Enum):
    GAUSSIAN = "gaussian"
    STUDENT_T = "student_t"
    LAPLACE = "laplace"
    LOGISTIC = "logistic"
    GUMBEL = "gumbel"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class FamilyKind:
    tag: FamilyTag
    nu: Optional[float] = None
    n_classes: Optional[int] = None

    def __post_init__(self):
        if self.tag == FamilyTag.STUDENT_T:
            if self.nu is None or not self.nu > 0 or not math.isfinite(self.nu):
                raise DomainError("StudentT requires a finite degrees-of-freedom nu > 0.")
        elif self.nu is not None:
            raise DomainError(f"Family '{self.tag.value}' does not take nu.")
        if self.tag == FamilyTag.CATEGORICAL:
            if self.n_classes is None or int(self.n_classes) != self.n_classes or self.n_classes < 2:
                raise DomainError("Categorical requires an integer n_classes >= 2.")
        elif self.n_classes is not None:
            raise DomainError(f"Family '{self.tag.value}' does not take n_classes.")

    @classmethod
    def gaussian(cls) -> "FamilyKind":
        return cls(FamilyTag.GAUSSIAN)

    @classmethod
    def student_t(cls, nu: float) -> "FamilyKind":
        return cls(FamilyTag.STUDENT_T, nu=float(nu))

    @classmethod
    def laplace(cls) -> "FamilyKind":
        return cls(FamilyTag.LAPLACE)

    @classmethod
    def logistic(cls) -> "FamilyKind":
        return cls(FamilyTag.LOGISTIC)

    @classmethod
    def gumbel(cls) -> "FamilyKind":
        return cls(FamilyTag.GUMBEL)

    @classmethod
    def categorical(cls, n_classes: int) -> "FamilyKind":
        return cls(FamilyTag.CATEGORICAL, n_classes=int(n_classes))

    @property
    def uses_precision(self) -> bool:
        return self.tag in (FamilyTag.GAUSSIAN, FamilyTag.STUDENT_T)

    @property
    def is_scalar(self) -> bool:
        return self.tag in (FamilyTag.LOGISTIC, FamilyTag.GUMBEL, FamilyTag.CATEGORICAL)

    @property
    def is_smooth(self) -> bool:
        return self.tag != FamilyTag.LAPLACE


@dataclass(frozen=True, eq=False)
class PrecisionParams:
    """Gaussian / Student's t block: ``B = Lam L`` and precision ``Lam``."""

    B: np.ndarray
    Lam: np.ndarray


@dataclass(frozen=True, eq=False)
class LaplaceParams:
    M: np.ndarray
    R: np.ndarray


@dataclass(frozen=True, eq=False)
class ScalarParams:
    """Logistic / Gumbel block: ``b = lam a`` and inverse scale ``lam``."""

    b: np.ndarray
    lam: float


@dataclass(frozen=True, eq=False)
class CategoricalParams:
    Theta: np.ndarray


EmissionParams = Union[PrecisionParams, LaplaceParams, ScalarParams, CategoricalParams]


# f and its derivative


def f_domain_lower(kind: FamilyKind) -> Optional[float]:
    """Open lower bound of the f-domain, ``None`` when f is defined on all reals."""
    if kind.tag == FamilyTag.STUDENT_T:
        return -kind.nu / 2.0
    if kind.tag == FamilyTag.LOGISTIC:
        return 0.0
    return None


def clamp_to_domain(kind: FamilyKind, x):
    lower = f_domain_lower(kind)
    if lower is None:
        return x
    return np.maximum(x, lower + DOMAIN_MARGIN)


def f_value_and_derivative(kind: FamilyKind, x, n_y: int = 1):
    """Return ``(f(x), f'(x))``; works elementwise on arrays."""
    arr = np.asarray(x, dtype=float)
    lower = f_domain_lower(kind)
    if lower is not None and np.any(~(arr > lower)):
        name = "x > -nu/2" if kind.tag == FamilyTag.STUDENT_T else "x > 0"
        raise DomainError(
            f"Argument outside the f-domain of family '{kind.tag.value}': requires {name} "
            f"(lower bound {lower!r})."
        )
    if not np.all(np.isfinite(arr)):
        raise DomainError("f argument must be finite.")

    if kind.tag == FamilyTag.STUDENT_T:
        nu = kind.nu
        value = 0.5 * (nu + n_y) * np.log1p(2.0 * arr / nu)
        deriv = (nu + n_y) / (nu + 2.0 * arr)
    elif kind.tag == FamilyTag.LAPLACE:
        value = SQRT2 * arr
        deriv = np.full_like(arr, SQRT2)
    elif kind.tag == FamilyTag.LOGISTIC:
        value = 2.0 * np.log(arr)
        deriv = 2.0 / arr
    else:
        value = arr.copy()
        deriv = np.ones_like(arr)

    if np.ndim(x) == 0:
        return float(value), float(deriv)
    return value, deriv


def derivative_bound(kind: FamilyKind, n_y: int = 1) -> float:
    """Upper bound of f' over the range of values l can take."""
    if kind.tag == FamilyTag.STUDENT_T:
        return (kind.nu + n_y) / kind.nu
    if kind.tag == FamilyTag.LAPLACE:
        return SQRT2
    if kind.tag == FamilyTag.LOGISTIC:
        # l = cosh(.) >= 1
        return 2.0
    return 1.0


def log_normalizer(kind: FamilyKind, n_y: int = 1) -> float:
    """``ln C``."""
    if kind.tag == FamilyTag.GAUSSIAN:
        return -0.5 * n_y * math.log(2.0 * math.pi)
    if kind.tag == FamilyTag.STUDENT_T:
        nu = kind.nu
        return float(
            gammaln(0.5 * (nu + n_y)) - gammaln(0.5 * nu) - 0.5 * n_y * math.log(math.pi * nu)
        )
    if kind.tag == FamilyTag.LAPLACE:
        return -0.5 * n_y * math.log(2.0)
    if kind.tag == FamilyTag.LOGISTIC:
        return -math.log(4.0)
    return 0.0


# Parameter validation and dimensions


def output_dim(kind: FamilyKind, params: EmissionParams) -> int:
    if kind.uses_precision:
        return params.B.shape[0]
    if kind.tag == FamilyTag.LAPLACE:
        return params.M.shape[0]
    return 1


def regressor_dim(kind: FamilyKind, params: EmissionParams) -> int:
    if kind.uses_precision:
        return params.B.shape[1]
    if kind.tag == FamilyTag.LAPLACE:
        return params.M.shape[1]
    if kind.tag == FamilyTag.CATEGORICAL:
        return params.Theta.shape[0]
    return params.b.shape[0]


def _expected_type(kind: FamilyKind):
    if kind.uses_precision:
        return PrecisionParams
    if kind.tag == FamilyTag.LAPLACE:
        return LaplaceParams
    if kind.tag == FamilyTag.CATEGORICAL:
        return CategoricalParams
    return ScalarParams


def validate_params(kind: FamilyKind, params: EmissionParams) -> None:
    expected = _expected_type(kind)
    if not isinstance(params, expected):
        raise DomainError(
            f"Family '{kind.tag.value}' expects {expected.__name__}, got {type(params).__name__}."
        )
    if isinstance(params, PrecisionParams):
        B, Lam = params.B, params.Lam
        if B.ndim != 2 or Lam.shape != (B.shape[0], B.shape[0]):
            raise DomainError(f"Shapes B {B.shape} and Lam {Lam.shape} are inconsistent.")
        if not (np.all(np.isfinite(B)) and np.all(np.isfinite(Lam))):
            raise DomainError("Precision parameters must be finite.")
        smallest = float(np.linalg.eigvalsh(0.5 * (Lam + Lam.T))[0])
        if not smallest > 0.0:
            raise DomainError(
                f"Precision matrix Lam is not positive definite (smallest eigenvalue {smallest!r})."
            )
    elif isinstance(params, LaplaceParams):
        M, R = params.M, params.R
        if M.ndim != 2 or R.shape != (M.shape[0], M.shape[0]):
            raise DomainError(f"Shapes M {M.shape} and R {R.shape} are inconsistent.")
        if np.any(R - np.diag(np.diag(R)) != 0.0):
            raise DomainError("Laplace R must be diagonal.")
        if not np.all(np.diag(R) > 0.0) or not np.all(np.isfinite(M)):
            raise DomainError("Laplace R must have strictly positive diagonal entries.")
    elif isinstance(params, ScalarParams):
        if params.b.ndim != 1 or not np.all(np.isfinite(params.b)):
            raise DomainError("Scalar family b must be a finite vector.")
        if not (params.lam > 0.0 and math.isfinite(params.lam)):
            raise DomainError(f"Scalar family lam must be positive, got {params.lam!r}.")
    else:
        if params.Theta.ndim != 2 or params.Theta.shape[1] != kind.n_classes:
            raise DomainError(
                f"Categorical Theta must have {kind.n_classes} columns, got shape {params.Theta.shape}."
            )


def _check_data_dims(kind: FamilyKind, params: EmissionParams, Y: np.ndarray, Z: np.ndarray) -> None:
    n_y = output_dim(kind, params)
    n_z = regressor_dim(kind, params)
    if Y.shape[-1] != n_y:
        raise DomainError(f"Observation dimension {Y.shape[-1]} does not match n_y={n_y}.")
    if Z.shape[-1] != n_z:
        raise DomainError(f"Regressor dimension {Z.shape[-1]} does not match n_z={n_z}.")
    if kind.tag == FamilyTag.CATEGORICAL:
        labels = Y[..., 0]
        if np.any(labels != np.round(labels)) or np.any(labels < 0) or np.any(labels >= kind.n_classes):
            raise DomainError(f"Categorical observations must be class indices in [0, {kind.n_classes}).")


def symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


# l and g


def ell_g_batch(kind: FamilyKind, params: EmissionParams, Y: np.ndarray, Z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized ``(l_t, g_t)`` over rows; no validation."""
    if kind.tag == FamilyTag.GAUSSIAN:
        B, Lam = params.B, params.Lam
        V = Z @ B.T
        ell = 0.5 * np.einsum("ti,ij,tj->t", Y, Lam, Y) - np.einsum("ti,ti->t", Y, V)
        sign, logdet = np.linalg.slogdet(Lam)
        W = np.linalg.solve(Lam, V.T).T
        g = 0.5 * (np.einsum("ti,ti->t", V, W) - logdet)
        return ell, g
    if kind.tag == FamilyTag.STUDENT_T:
        B, Lam = params.B, params.Lam
        L = np.linalg.solve(Lam, B)
        E = Y - Z @ L.T
        ell = 0.5 * np.einsum("ti,ij,tj->t", E, Lam, E)
        sign, logdet = np.linalg.slogdet(Lam)
        g = np.full(Y.shape[0], -0.5 * logdet)
        return ell, g
    if kind.tag == FamilyTag.LAPLACE:
        r = np.diag(params.R)
        resid = Y * r - Z @ params.M.T
        ell = np.abs(resid).sum(axis=1)
        g = np.full(Y.shape[0], -np.log(r).sum())
        return ell, g
    if kind.tag == FamilyTag.LOGISTIC:
        u = params.lam * Y[:, 0] - Z @ params.b
        return np.cosh(0.5 * u), np.full(Y.shape[0], -math.log(params.lam))
    if kind.tag == FamilyTag.GUMBEL:
        u = params.lam * Y[:, 0] - Z @ params.b
        return np.exp(-u), -math.log(params.lam) + u
    logits = Z @ params.Theta
    labels = Y[:, 0].astype(int)
    ell = -logits[np.arange(Y.shape[0]), labels]
    return ell, logsumexp(logits, axis=1)


def ell_g_grads_batch(kind: FamilyKind, params: EmissionParams, Y: np.ndarray, Z: np.ndarray):
    """Per-row ``(l, g, dl, dg)`` with gradients over the free coordinates.

    Laplace gradients of l are subgradients (sign taken as 0 on a kink).
    """
    ell, g = ell_g_batch(kind, params, Y, Z)
    m = Y.shape[0]
    if kind.uses_precision:
        B, Lam = params.B, params.Lam
        n_y = B.shape[0]
        Lam_inv = np.linalg.inv(Lam)
        yyT = np.einsum("ti,tj->tij", Y, Y)
        if kind.tag == FamilyTag.GAUSSIAN:
            V = Z @ B.T
            W = V @ Lam_inv.T
            dl_B = -np.einsum("ti,tj->tij", Y, Z)
            dl_Lam = 0.5 * yyT
            dg_B = np.einsum("ti,tj->tij", W, Z)
            dg_Lam = -0.5 * np.einsum("ti,tj->tij", W, W) - 0.5 * Lam_inv[None, :, :]
        else:
            L = Lam_inv @ B
            P = Z @ L.T
            E = Y - P
            dl_B = -np.einsum("ti,tj->tij", E, Z)
            dl_Lam = 0.5 * yyT - 0.5 * np.einsum("ti,tj->tij", P, P)
            dg_B = np.zeros_like(dl_B)
            dg_Lam = np.broadcast_to(-0.5 * Lam_inv, (m, n_y, n_y))
        dl = np.concatenate([dl_B.reshape(m, -1), sym_to_free(dl_Lam)], axis=1)
        dg = np.concatenate([dg_B.reshape(m, -1), sym_to_free(dg_Lam)], axis=1)
        return ell, g, dl, dg
    if kind.tag == FamilyTag.LAPLACE:
        r = np.diag(params.R)
        s = np.sign(Y * r - Z @ params.M.T)
        dl_M = -np.einsum("ti,tj->tij", s, Z).reshape(m, -1)
        dl_r = s * Y
        dg_M = np.zeros_like(dl_M)
        dg_r = np.broadcast_to(-1.0 / r, (m, r.shape[0]))
        return ell, g, np.hstack([dl_M, dl_r]), np.hstack([dg_M, dg_r])
    if kind.tag in (FamilyTag.LOGISTIC, FamilyTag.GUMBEL):
        y = Y[:, 0]
        u = params.lam * y - Z @ params.b
        if kind.tag == FamilyTag.LOGISTIC:
            du = 0.5 * np.sinh(0.5 * u)
            dl = np.hstack([-du[:, None] * Z, (du * y)[:, None]])
            dg = np.hstack([np.zeros_like(Z), np.full((m, 1), -1.0 / params.lam)])
        else:
            e = np.exp(-u)
            dl = np.hstack([e[:, None] * Z, (-e * y)[:, None]])
            dg = np.hstack([-Z, (y - 1.0 / params.lam)[:, None]])
        return ell, g, dl, dg
    Theta = params.Theta
    probs = softmax(Z @ Theta, axis=1)
    onehot = np.zeros_like(probs)
    onehot[np.arange(m), Y[:, 0].astype(int)] = 1.0
    dl = -np.einsum("ti,tk->tik", Z, onehot).reshape(m, -1)
    dg = np.einsum("ti,tk->tik", Z, probs).reshape(m, -1)
    return ell, g, dl, dg


def _as_batch(y, z) -> Tuple[np.ndarray, np.ndarray, bool]:
    Y = np.atleast_1d(np.asarray(y, dtype=float))
    Z = np.atleast_1d(np.asarray(z, dtype=float))
    single = Y.ndim == 1
    if single:
        Y = Y[None, :]
        Z = Z[None, :]
    return Y, Z, single


def ell_g_with_grads(kind: FamilyKind, params: EmissionParams, y, z):
    """``(l, g, grad l, grad g)`` at one sample; gradients over the free coordinates."""
    validate_params(kind, params)
    Y, Z, _ = _as_batch(y, z)
    _check_data_dims(kind, params, Y, Z)
    ell, g, dl, dg = ell_g_grads_batch(kind, params, Y, Z)
    return float(ell[0]), float(g[0]), dl[0].copy(), dg[0].copy()


def log_density_batch(kind: FamilyKind, params: EmissionParams, Y: np.ndarray, Z: np.ndarray) -> np.ndarray:
    n_y = output_dim(kind, params)
    ell, g = ell_g_batch(kind, params, Y, Z)
    f_val, _ = f_value_and_derivative(kind, clamp_to_domain(kind, ell), n_y=n_y)
    return log_normalizer(kind, n_y) - f_val - g


def log_density(kind: FamilyKind, params: EmissionParams, y, z):
    """``ln C - f(l) - g``; scalar for one sample, vector for a batch of rows."""
    validate_params(kind, params)
    Y, Z, single = _as_batch(y, z)
    _check_data_dims(kind, params, Y, Z)
    out = log_density_batch(kind, params, Y, Z)
    return float(out[0]) if single else out


# Sampling


def sample_emission(kind: FamilyKind, params: EmissionParams, z, rng: np.random.Generator) -> np.ndarray:
    """Draw ``y`` for each regressor row; returns ``(n_y,)`` for one ``z`` else ``(m, n_y)``."""
    validate_params(kind, params)
    Z = np.asarray(z, dtype=float)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    if Z.shape[1] != regressor_dim(kind, params):
        raise DomainError(
            f"Regressor dimension {Z.shape[1]} does not match n_z={regressor_dim(kind, params)}."
        )
    Y = sample_emission_batch(kind, params, Z, rng)
    return Y[0] if single else Y


def sample_emission_batch(kind: FamilyKind, params: EmissionParams, Z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    m = Z.shape[0]
    if kind.uses_precision:
        L, Sigma = to_natural(kind, params)
        chol = np.linalg.cholesky(Sigma)
        noise = rng.standard_normal((m, L.shape[0])) @ chol.T
        if kind.tag == FamilyTag.STUDENT_T:
            noise = noise / np.sqrt(rng.chisquare(kind.nu, size=m) / kind.nu)[:, None]
        return Z @ L.T + noise
    if kind.tag == FamilyTag.LAPLACE:
        r = np.diag(params.R)
        w = rng.laplace(0.0, 1.0 / SQRT2, size=(m, r.shape[0]))
        return (Z @ params.M.T + w) / r
    if kind.tag in (FamilyTag.LOGISTIC, FamilyTag.GUMBEL):
        u_rand = rng.uniform(size=m)
        if kind.tag == FamilyTag.LOGISTIC:
            u = np.log(u_rand) - np.log1p(-u_rand)
        else:
            u = -np.log(-np.log(u_rand))
        return ((u + Z @ params.b) / params.lam)[:, None]
    probs = softmax(Z @ params.Theta, axis=1)
    cdf = np.cumsum(probs, axis=1)
    draws = rng.uniform(size=(m, 1))
    labels = np.minimum((draws > cdf).sum(axis=1), probs.shape[1] - 1)
    return labels[:, None].astype(float)


# Natural parameters


def to_natural(kind: FamilyKind, params: EmissionParams):
    """Return ``(location map, scale)``: ``(L, Sigma)``, ``(a, scale)`` or ``(Theta, None)``."""
    if kind.uses_precision:
        return np.linalg.solve(params.Lam, params.B), np.linalg.inv(params.Lam)
    if kind.tag == FamilyTag.LAPLACE:
        r = np.diag(params.R)
        return params.M / r[:, None], np.diag(1.0 / r**2)
    if kind.tag == FamilyTag.CATEGORICAL:
        return params.Theta.copy(), None
    return params.b / params.lam, 1.0 / params.lam


def from_natural(kind: FamilyKind, location, scale=None) -> EmissionParams:
    if kind.uses_precision:
        Lam = symmetrize(np.linalg.inv(np.asarray(scale, dtype=float)))
        return PrecisionParams(B=Lam @ np.asarray(location, dtype=float), Lam=Lam)
    if kind.tag == FamilyTag.LAPLACE:
        r = 1.0 / np.sqrt(np.diag(np.asarray(scale, dtype=float)))
        return LaplaceParams(M=np.asarray(location, dtype=float) * r[:, None], R=np.diag(r))
    if kind.tag == FamilyTag.CATEGORICAL:
        return CategoricalParams(Theta=np.array(location, dtype=float))
    lam = 1.0 / float(scale)
    return ScalarParams(b=lam * np.asarray(location, dtype=float), lam=lam)


# Free-coordinate vectorization


def sym_to_free(G: np.ndarray) -> np.ndarray:
    """Map symmetric gradient matrices (..., n, n) to upper-triangle coordinates."""
    n = G.shape[-1]
    iu = np.triu_indices(n)
    factor = np.where(iu[0] == iu[1], 1.0, 2.0)
    return G[..., iu[0], iu[1]] * factor


def free_to_sym(vec: np.ndarray, n: int) -> np.ndarray:
    iu = np.triu_indices(n)
    out = np.zeros((n, n))
    out[iu] = vec
    out[(iu[1], iu[0])] = vec
    return out


def params_to_vector(kind: FamilyKind, params: EmissionParams) -> np.ndarray:
    if kind.uses_precision:
        iu = np.triu_indices(params.Lam.shape[0])
        return np.concatenate([params.B.ravel(), params.Lam[iu]])
    if kind.tag == FamilyTag.LAPLACE:
        return np.concatenate([params.M.ravel(), np.diag(params.R)])
    if kind.tag == FamilyTag.CATEGORICAL:
        return params.Theta.ravel().copy()
    return np.concatenate([params.b, [params.lam]])


def params_from_vector(kind: FamilyKind, vec: np.ndarray, like: EmissionParams) -> EmissionParams:
    vec = np.asarray(vec, dtype=float)
    if kind.uses_precision:
        n_y, n_z = like.B.shape
        return PrecisionParams(
            B=vec[: n_y * n_z].reshape(n_y, n_z).copy(),
            Lam=free_to_sym(vec[n_y * n_z :], n_y),
        )
    if kind.tag == FamilyTag.LAPLACE:
        n_y, n_z = like.M.shape
        return LaplaceParams(
            M=vec[: n_y * n_z].reshape(n_y, n_z).copy(),
            R=np.diag(vec[n_y * n_z :]),
        )
    if kind.tag == FamilyTag.CATEGORICAL:
        return CategoricalParams(Theta=vec.reshape(like.Theta.shape).copy())
    return ScalarParams(b=vec[:-1].copy(), lam=float(vec[-1]))


# Emission regularizers


def emission_penalty(kind: FamilyKind, params: EmissionParams, gamma2: float, gamma3: float) -> float:
    """Per-mode emission regularizer, derived from the family's conjugate-prior pattern."""
    if kind.uses_precision:
        Lam = params.Lam
        sign, logdet = np.linalg.slogdet(Lam)
        quad = float(np.trace(params.B.T @ np.linalg.solve(Lam, params.B)))
        return 0.5 * (gamma2 * (float(np.trace(Lam)) - logdet) + gamma3 * quad)
    if kind.tag == FamilyTag.LAPLACE:
        r = np.diag(params.R)
        return float(gamma2 * np.sum(r - np.log(r)) + gamma3 * np.sum(params.M**2))
    if kind.tag == FamilyTag.CATEGORICAL:
        return float(0.5 * gamma3 * np.sum(params.Theta**2))
    lam = params.lam
    return float(gamma2 * (lam - math.log(lam)) + gamma3 * np.dot(params.b, params.b) / lam)


def emission_penalty_grad(kind: FamilyKind, params: EmissionParams, gamma2: float, gamma3: float) -> np.ndarray:
    if kind.uses_precision:
        Lam_inv = np.linalg.inv(params.Lam)
        W = Lam_inv @ params.B
        d_B = gamma3 * W
        d_Lam = 0.5 * gamma2 * (np.eye(Lam_inv.shape[0]) - Lam_inv) - 0.5 * gamma3 * (W @ W.T)
        return np.concatenate([d_B.ravel(), sym_to_free(d_Lam)])
    if kind.tag == FamilyTag.LAPLACE:
        r = np.diag(params.R)
        return np.concatenate([(2.0 * gamma3 * params.M).ravel(), gamma2 * (1.0 - 1.0 / r)])
    if kind.tag == FamilyTag.CATEGORICAL:
        return (gamma3 * params.Theta).ravel()
    lam = params.lam
    bb = float(np.dot(params.b, params.b))
    d_b = 2.0 * gamma3 * params.b / lam
    d_lam = gamma2 * (1.0 - 1.0 / lam) - gamma3 * bb / lam**2
    return np.concatenate([d_b, [d_lam]])
