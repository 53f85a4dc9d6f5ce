"""Outer majorization-minimization loop, initialization and multi-start."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from switchfit import families as fam
from switchfit.data import DatasetSplit, RegressorConfig, Trajectory, regressor_matrix
from switchfit.errors import (
    ConfigError,
    DomainError,
    MonotonicityError,
    NumericalError,
)
from switchfit.likelihood import (
    ModelParams,
    Regularizer,
    SwitchStructure,
    model_regressors,
    model_vector,
    nll,
    reg_nll,
    theta_shape,
)
from switchfit.mstep import (
    SolverOptions,
    build_weights,
    gradient_mask,
    m_step,
    surrogate_gradient_at_base,
)
from switchfit.posterior import e_step


logger = logging.getLogger(__name__)


class StopReason(Enum):
    GRADIENT = "gradient"
    REL_DECREASE = "relative-decrease"
    MAX_ITERS = "max-iters"


@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 500
    grad_stop: float = 1e-4
    rel_decrease_stop: float = 1e-10
    n_restarts: int = 5
    seed: int = 0
    monotonicity_slack: float = 1e-8
    fixed_covariance: bool = False
    n_workers: int = 1
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        for name in ("max_iters", "n_restarts", "n_workers"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}.", field=name)
        for name in ("grad_stop", "rel_decrease_stop", "monotonicity_slack"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and value > 0.0 and math.isfinite(value)):
                raise ConfigError(f"must be a positive number, got {value!r}.", field=name)
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"must be a non-negative integer, got {self.seed!r}.", field="seed")


@dataclass(frozen=True)
class ModelSkeleton:
    """Everything about a model except its parameter values."""

    structure: SwitchStructure
    family: fam.FamilyKind
    d: int
    cfg: RegressorConfig

    def __post_init__(self):
        if isinstance(self.d, bool) or not isinstance(self.d, int) or self.d < 1:
            raise ConfigError(f"must be a positive integer, got {self.d!r}.", field="modes")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    reg_nll: float
    grad_norm: Optional[float]
    e_seconds: float
    m_seconds: float
    param_delta: float
    exact: bool


@dataclass(frozen=True)
class RestartSummary:
    index: int
    seed: int
    reg_nll: Optional[float]
    validation_nll: Optional[float]
    iterations: int
    stop_reason: Optional[StopReason]
    error: Optional[str] = None


@dataclass(frozen=True, eq=False)
class FitReport:
    model: ModelParams
    alpha0: np.ndarray
    reg: Regularizer
    iterations: Tuple[IterationRecord, ...]
    reg_nll_history: Tuple[float, ...]
    stop_reason: StopReason
    final_grad_norm: Optional[float]
    restarts: Tuple[RestartSummary, ...] = ()
    best_restart: int = 0
    validation_nll: Optional[float] = None
    grid: Tuple[dict, ...] = ()

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    @property
    def final_reg_nll(self) -> float:
        return self.reg_nll_history[-1]


# Initialization


def _least_squares(Z: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Rows of ``L`` in ``Y ~ Z L^T``."""
    gram = Z.T @ Z + 1e-10 * np.eye(Z.shape[1])
    return np.linalg.solve(gram, Z.T @ Y).T


def _residual_covariance(R: np.ndarray) -> np.ndarray:
    cov = fam.symmetrize(R.T @ R / R.shape[0])
    scale = max(float(np.trace(cov)) / cov.shape[0], 0.0)
    if np.linalg.eigvalsh(cov)[0] <= 1e-12 * max(scale, 1.0):
        # degenerate residuals: inflated identity
        cov = (scale + 1.0) * np.eye(cov.shape[0])
    return cov


def _initial_emission(
    skeleton: ModelSkeleton,
    Z: np.ndarray,
    Y: np.ndarray,
    rng: np.random.Generator,
    fixed_precision: Optional[np.ndarray],
) -> List[fam.EmissionParams]:
    kind = skeleton.family
    d = skeleton.d
    if kind.tag == fam.FamilyTag.CATEGORICAL:
        return [fam.CategoricalParams(Theta=0.1 * rng.standard_normal((Z.shape[1], kind.n_classes))) for _ in range(d)]

    L = _least_squares(Z, Y)
    cov = _residual_covariance(Y - Z @ L.T)
    params = []
    for _ in range(d):
        Lj = L if d == 1 else L + 0.1 * (np.abs(L) + 0.1) * rng.standard_normal(L.shape)
        if kind.uses_precision:
            Lam = fixed_precision if fixed_precision is not None else fam.symmetrize(np.linalg.inv(cov))
            params.append(fam.PrecisionParams(B=Lam @ Lj, Lam=np.array(Lam, dtype=float)))
        elif kind.tag == fam.FamilyTag.LAPLACE:
            scale = np.sqrt(np.diag(cov))
            params.append(fam.from_natural(kind, Lj, np.diag(scale**2)))
        else:
            std = math.sqrt(float(cov[0, 0]))
            if kind.tag == fam.FamilyTag.LOGISTIC:
                scale = std * math.sqrt(3.0) / math.pi
            else:
                scale = std * math.sqrt(6.0) / math.pi
            params.append(fam.from_natural(kind, Lj[0], scale))
    return params


def initialize(
    skeleton: ModelSkeleton,
    traj: Trajectory,
    seed: int,
    fixed_precision: Optional[np.ndarray] = None,
) -> Tuple[ModelParams, np.ndarray]:
    """Random switching parameters, moment-based emission parameters, random ``alpha0``."""
    rng = np.random.default_rng(seed)
    Z = regressor_matrix(traj, skeleton.cfg)
    Y = traj.y[1:]
    if fixed_precision is not None:
        if not skeleton.family.uses_precision:
            raise DomainError(f"A fixed precision needs a gaussian or student_t family, got '{skeleton.family.tag.value}'.")
        fixed_precision = np.asarray(fixed_precision, dtype=float)
    theta = 0.1 * rng.standard_normal(theta_shape(skeleton.structure, skeleton.d, Z.shape[1]))
    betas = _initial_emission(skeleton, Z, Y, rng, fixed_precision)
    alpha0 = rng.dirichlet(np.ones(skeleton.d))
    model = ModelParams(
        structure=skeleton.structure,
        family=skeleton.family,
        betas=tuple(betas),
        theta=theta,
        cfg=skeleton.cfg,
    )
    return model, alpha0


# Outer loop


def fit(
    model0: ModelParams,
    alpha0,
    traj: Trajectory,
    reg: Regularizer,
    opts: Optional[FitOptions] = None,
) -> FitReport:
    opts = opts or FitOptions()
    if opts.fixed_covariance and not model0.family.uses_precision:
        raise DomainError(f"Fixed-covariance fitting needs a gaussian or student_t family, got '{model0.family.tag.value}'.")
    Z = model_regressors(model0, traj)
    mask = gradient_mask(model0, opts.fixed_covariance)
    model = model0
    alpha = np.asarray(alpha0, dtype=float)

    start = time.perf_counter()
    post = e_step(model, traj, alpha)
    e_seconds = time.perf_counter() - start
    value = -post.loglik + reg.value(model)
    if not math.isfinite(value):
        raise NumericalError(f"Initial regularized NLL is not finite ({value!r})")

    records: List[IterationRecord] = []
    history = [value]
    reason = StopReason.MAX_ITERS
    grad_norm: Optional[float] = None

    for k in range(opts.max_iters):
        weights = build_weights(model, post, traj, Z)
        grad_norm = None
        if model.family.is_smooth:
            grad = surrogate_gradient_at_base(model, weights, traj, reg)
            grad_norm = float(np.linalg.norm(grad[mask]))
            if grad_norm <= opts.grad_stop:
                reason = StopReason.GRADIENT
                break

        start = time.perf_counter()
        new_alpha = post.gamma[0].copy()
        new_model, exact = m_step(model, weights, traj, reg, opts.solver, opts.fixed_covariance, Z)
        m_seconds = time.perf_counter() - start

        start = time.perf_counter()
        new_post = e_step(new_model, traj, new_alpha)
        new_value = -new_post.loglik + reg.value(new_model)
        e_seconds = time.perf_counter() - start
        if not math.isfinite(new_value):
            raise NumericalError(f"Regularized NLL became non-finite at iteration {k + 1}")
        if new_value > value + opts.monotonicity_slack:
            raise MonotonicityError(
                f"Regularized NLL increased from {value!r} to {new_value!r} at iteration {k + 1}"
            )
        delta = float(np.max(np.abs(model_vector(new_model) - model_vector(model)), initial=0.0))
        records.append(
            IterationRecord(
                iteration=k + 1,
                reg_nll=new_value,
                grad_norm=grad_norm,
                e_seconds=e_seconds,
                m_seconds=m_seconds,
                param_delta=delta,
                exact=exact,
            )
        )
        logger.info(
            "iter %4d  reg_nll %.10g  grad %s  e %.3fs  m %.3fs",
            k + 1,
            new_value,
            "n/a" if grad_norm is None else f"{grad_norm:.3e}",
            e_seconds,
            m_seconds,
        )
        history.append(new_value)
        decrease = value - new_value
        model, alpha, post, value = new_model, new_alpha, new_post, new_value
        if decrease <= opts.rel_decrease_stop * max(1.0, abs(value)):
            reason = StopReason.REL_DECREASE
            grad_norm = None
            break

    return FitReport(
        model=model,
        alpha0=alpha,
        reg=reg,
        iterations=tuple(records),
        reg_nll_history=tuple(history),
        stop_reason=reason,
        final_grad_norm=grad_norm,
    )


# Multi-start and grids


def _restart_seeds(seed: int, n: int) -> List[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _validation_score(report: FitReport, traj: Trajectory, split: Optional[DatasetSplit]) -> Optional[float]:
    if split is None or split.validation is None:
        return None
    return reg_nll(report.model, traj, report.reg, report.alpha0, span=split.validation)


def multistart_fit(
    skeleton: ModelSkeleton,
    traj: Trajectory,
    reg: Regularizer,
    opts: Optional[FitOptions] = None,
    split: Optional[DatasetSplit] = None,
    fixed_precision: Optional[np.ndarray] = None,
) -> FitReport:
    """Independent fits from random starts; the best by validation (else training) score wins.

    With a split the model is fitted on the training range and validated on
    the validation range of ``traj``.
    """
    opts = opts or FitOptions()
    if split is not None:
        split.check_within(traj)
        train = traj.segment(split.train[0], split.train[1], skeleton.cfg)
    else:
        train = traj
    seeds = _restart_seeds(opts.seed, opts.n_restarts)

    def run(index: int):
        try:
            model0, alpha0 = initialize(skeleton, train, seeds[index], fixed_precision)
            report = fit(model0, alpha0, train, reg, opts)
        except MonotonicityError:
            raise
        except (NumericalError, DomainError) as exc:
            logger.warning("restart %d failed: %s", index, exc)
            return index, None, str(exc)
        return index, report, None

    if opts.n_workers > 1:
        with ThreadPoolExecutor(max_workers=opts.n_workers) as pool:
            outcomes = list(pool.map(run, range(opts.n_restarts)))
    else:
        outcomes = [run(i) for i in range(opts.n_restarts)]

    summaries = []
    best: Optional[Tuple[float, int, FitReport, Optional[float]]] = None
    for index, report, error in outcomes:
        if report is None:
            summaries.append(RestartSummary(index, seeds[index], None, None, 0, None, error))
            continue
        validation = _validation_score(report, traj, split)
        summaries.append(
            RestartSummary(
                index=index,
                seed=seeds[index],
                reg_nll=report.final_reg_nll,
                validation_nll=validation,
                iterations=report.n_iterations,
                stop_reason=report.stop_reason,
            )
        )
        score = validation if validation is not None else report.final_reg_nll
        logger.info("restart %d: reg_nll %.10g  score %.10g  (%s)", index, report.final_reg_nll, score, report.stop_reason.value)
        if best is None or score < best[0]:
            best = (score, index, report, validation)

    if best is None:
        details = "; ".join(f"restart {s.index}: {s.error}" for s in summaries)
        raise NumericalError(f"All {opts.n_restarts} restarts failed: {details}")
    _, index, report, validation = best
    return replace(report, restarts=tuple(summaries), best_restart=index, validation_nll=validation)


def grid_fit(
    skeleton: ModelSkeleton,
    traj: Trajectory,
    regs: Sequence[Regularizer],
    opts: Optional[FitOptions] = None,
    split: Optional[DatasetSplit] = None,
    fixed_precision: Optional[np.ndarray] = None,
) -> FitReport:
    """Multi-start fit for every regularizer; keeps the best validation NLL.

    Grid points are compared by the unregularized NLL of the validation range
    when a split is given, else by their training score.
    """
    if not regs:
        raise ConfigError("needs at least one regularizer.", field="regularizer")
    opts = opts or FitOptions()
    best: Optional[Tuple[float, FitReport]] = None
    grid = []
    for reg in regs:
        try:
            report = multistart_fit(skeleton, traj, reg, opts, split, fixed_precision)
        except MonotonicityError:
            raise
        except NumericalError as exc:
            grid.append({"regularizer": reg, "error": str(exc), "score": None})
            continue
        if split is not None and split.validation is not None:
            score = nll(report.model, traj, report.alpha0, span=split.validation)
        else:
            score = report.final_reg_nll
        grid.append({"regularizer": reg, "error": None, "score": score})
        if best is None or score < best[0]:
            best = (score, report)
    if best is None:
        raise NumericalError("Every regularizer of the grid failed to fit")
    return replace(best[1], grid=tuple(grid))

