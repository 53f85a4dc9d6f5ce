"""Parsing and validation of the JSON document read by ``switchfit fit``."""

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from switchfit import families as fam
from switchfit.data import DatasetSplit, RegressorConfig
from switchfit.driver import FitOptions, ModelSkeleton
from switchfit.errors import ConfigError, DomainError
from switchfit.likelihood import Regularizer, SwitchStructure
from switchfit.mstep import SolverOptions


_TOP_LEVEL_KEYS = {
    "structure",
    "family",
    "modes",
    "lags",
    "regularizer",
    "restarts",
    "seed",
    "max_iters",
    "grad_stop",
    "rel_decrease_stop",
    "split",
    "fixed_covariance",
    "fixed_precision",
    "workers",
    "solver",
}
_REQUIRED_KEYS = ("structure", "family", "modes")
# FitOptions field -> config key
_OPTION_KEYS = {"n_restarts": "restarts", "n_workers": "workers"}


@dataclass(frozen=True, eq=False)
class FitConfig:
    skeleton: ModelSkeleton
    regularizers: Tuple[Regularizer, ...]
    options: FitOptions
    split: Optional[DatasetSplit] = None
    fixed_precision: Optional[np.ndarray] = None


def _check_keys(payload: Any, allowed, where: str) -> Dict[str, Any]:
    if not isinstance(payload, dict):
        raise ConfigError("must be a JSON object.", field=where or "config")
    prefix = f"{where}." if where else ""
    for key in payload:
        if key not in allowed:
            raise ConfigError(f"unknown key, expected one of {sorted(allowed)}.", field=prefix + key)
    return payload


def _parse_family(value: Any) -> fam.FamilyKind:
    if isinstance(value, str):
        value = {"name": value}
    payload = _check_keys(value, {"name", "nu", "n_classes"}, "family")
    if "name" not in payload:
        raise ConfigError("is required.", field="family.name")
    try:
        tag = fam.FamilyTag(payload["name"])
    except ValueError:
        choices = [t.value for t in fam.FamilyTag]
        raise ConfigError(f"unknown family '{payload['name']}', expected one of {choices}.", field="family.name")
    try:
        return fam.FamilyKind(tag, nu=payload.get("nu"), n_classes=payload.get("n_classes"))
    except (DomainError, TypeError) as exc:
        raise ConfigError(str(exc), field="family")


def _parse_lags(value: Any) -> RegressorConfig:
    payload = _check_keys(value, {"t_y", "t_u", "bias"}, "lags")
    bias = payload.get("bias", True)
    if not isinstance(bias, bool):
        raise ConfigError(f"must be true or false, got {bias!r}.", field="lags.bias")
    try:
        return RegressorConfig(t_y=payload.get("t_y", 1), t_u=payload.get("t_u", 0), include_bias=bias)
    except ConfigError as exc:
        raise ConfigError(exc.detail, field=f"lags.{exc.field}")


def _parse_regularizer(value: Any, where: str) -> Regularizer:
    payload = _check_keys(value, {"gamma1", "gamma2", "gamma3"}, where)
    try:
        return Regularizer(**payload)
    except ConfigError as exc:
        raise ConfigError(exc.detail, field=f"{where}.{exc.field}")


def _parse_regularizers(value: Any) -> Tuple[Regularizer, ...]:
    if isinstance(value, list):
        if not value:
            raise ConfigError("the grid needs at least one entry.", field="regularizer")
        return tuple(_parse_regularizer(item, f"regularizer[{k}]") for k, item in enumerate(value))
    return (_parse_regularizer(value, "regularizer"),)


def _parse_range(value: Any, where: str) -> Optional[Tuple[int, int]]:
    if value is None:
        return None
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    ):
        raise ConfigError(f"must be a pair of integers [start, stop], got {value!r}.", field=where)
    return int(value[0]), int(value[1])


def _parse_split(value: Any) -> DatasetSplit:
    payload = _check_keys(value, {"train", "validation", "test"}, "split")
    if "train" not in payload:
        raise ConfigError("is required.", field="split.train")
    return DatasetSplit(
        train=_parse_range(payload["train"], "split.train"),
        validation=_parse_range(payload.get("validation"), "split.validation"),
        test=_parse_range(payload.get("test"), "split.test"),
    )


def _parse_solver(value: Any) -> SolverOptions:
    allowed = {f.name for f in fields(SolverOptions)}
    return SolverOptions(**_check_keys(value, allowed, "solver"))


def _parse_fixed_precision(value: Any) -> np.ndarray:
    try:
        mat = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("must be a square numeric matrix.", field="fixed_precision")
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or not np.all(np.isfinite(mat)):
        raise ConfigError(f"must be a finite square matrix, got shape {mat.shape}.", field="fixed_precision")
    return mat


def parse_fit_config(payload: Any) -> FitConfig:
    payload = _check_keys(payload, _TOP_LEVEL_KEYS, "")
    for key in _REQUIRED_KEYS:
        if key not in payload:
            raise ConfigError("is required.", field=key)

    structure = SwitchStructure.parse(payload["structure"])
    skeleton = ModelSkeleton(
        structure=structure,
        family=_parse_family(payload["family"]),
        d=payload["modes"],
        cfg=_parse_lags(payload.get("lags", {})),
    )
    fixed_covariance = payload.get("fixed_covariance", False)
    if not isinstance(fixed_covariance, bool):
        raise ConfigError(f"must be true or false, got {fixed_covariance!r}.", field="fixed_covariance")
    fixed_precision = None
    if payload.get("fixed_precision") is not None:
        fixed_precision = _parse_fixed_precision(payload["fixed_precision"])
        fixed_covariance = True
    if fixed_covariance and not skeleton.family.uses_precision:
        field = "fixed_precision" if fixed_precision is not None else "fixed_covariance"
        raise ConfigError(f"needs a gaussian or student_t family, got '{skeleton.family.tag.value}'.", field=field)

    defaults = FitOptions()
    try:
        options = _fit_options(payload, defaults, fixed_covariance)
    except ConfigError as exc:
        raise ConfigError(exc.detail, field=_OPTION_KEYS.get(exc.field, exc.field))
    return FitConfig(
        skeleton=skeleton,
        regularizers=_parse_regularizers(payload.get("regularizer", {})),
        options=options,
        split=_parse_split(payload["split"]) if payload.get("split") is not None else None,
        fixed_precision=fixed_precision,
    )


def _fit_options(payload: Dict[str, Any], defaults: FitOptions, fixed_covariance: bool) -> FitOptions:
    return FitOptions(
        max_iters=payload.get("max_iters", defaults.max_iters),
        grad_stop=payload.get("grad_stop", defaults.grad_stop),
        rel_decrease_stop=payload.get("rel_decrease_stop", defaults.rel_decrease_stop),
        n_restarts=payload.get("restarts", defaults.n_restarts),
        seed=payload.get("seed", defaults.seed),
        fixed_covariance=fixed_covariance,
        n_workers=payload.get("workers", defaults.n_workers),
        solver=_parse_solver(payload.get("solver", {})),
    )


def load_fit_config(path) -> FitConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}", field="config")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON ({exc.msg}, line {exc.lineno}).", field="config")
    return parse_fit_config(payload)
