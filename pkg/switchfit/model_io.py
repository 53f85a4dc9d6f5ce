import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from switchfit import families as fam
from switchfit.data import RegressorConfig, Trajectory
from switchfit.driver import FitReport
from switchfit.errors import ConfigError, DataError, DomainError, data_source_context
from switchfit.likelihood import ModelParams, Regularizer, SwitchStructure, check_alpha0


MODEL_FILE_VERSION = 1


def trajectory_hash(traj: Trajectory) -> str:
    """SHA-256 over the shapes and raw values of ``y`` and ``u``."""
    digest = hashlib.sha256()
    for arr in (traj.y, traj.u):
        if arr is None:
            digest.update(b"none")
            continue
        digest.update(repr(arr.shape).encode("utf-8"))
        digest.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return digest.hexdigest()


def _family_to_dict(kind: fam.FamilyKind) -> Dict[str, Any]:
    out: Dict[str, Any] = {"name": kind.tag.value}
    if kind.nu is not None:
        out["nu"] = kind.nu
    if kind.n_classes is not None:
        out["n_classes"] = kind.n_classes
    return out


def _beta_to_dict(beta: fam.EmissionParams) -> Dict[str, Any]:
    if isinstance(beta, fam.PrecisionParams):
        return {"B": beta.B.tolist(), "Lam": beta.Lam.tolist()}
    if isinstance(beta, fam.LaplaceParams):
        return {"M": beta.M.tolist(), "R": beta.R.tolist()}
    if isinstance(beta, fam.ScalarParams):
        return {"b": beta.b.tolist(), "lam": beta.lam}
    return {"Theta": beta.Theta.tolist()}


def model_to_dict(
    model: ModelParams,
    alpha0,
    reg: Optional[Regularizer] = None,
    *,
    seed: Optional[int] = None,
    data_hash: Optional[str] = None,
) -> Dict[str, Any]:
    """Serialize a model into the JSON model-file payload."""
    reg = reg or Regularizer()
    return {
        "version": MODEL_FILE_VERSION,
        "structure": model.structure.value,
        "family": _family_to_dict(model.family),
        "d": model.d,
        "regressor": {
            "t_y": model.cfg.t_y,
            "t_u": model.cfg.t_u,
            "bias": model.cfg.include_bias,
        },
        "theta": model.theta.tolist(),
        "betas": [_beta_to_dict(beta) for beta in model.betas],
        "alpha0": check_alpha0(alpha0, model.d).tolist(),
        "regularizer": {"gamma1": reg.gamma1, "gamma2": reg.gamma2, "gamma3": reg.gamma3},
        "provenance": {"seed": seed, "data_hash": data_hash},
    }


def _require(payload: Dict[str, Any], key: str, where: str = "") -> Any:
    if key not in payload:
        raise DataError(f"Model file is missing '{where}{key}'.")
    return payload[key]


def _array(value: Any, where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise DataError(f"Model file field '{where}' is not a numeric array.") from exc
    if not np.all(np.isfinite(arr)):
        raise DataError(f"Model file field '{where}' has non-finite entries.")
    return arr


def _family_from_dict(payload: Dict[str, Any]) -> fam.FamilyKind:
    name = _require(payload, "name", "family.")
    try:
        tag = fam.FamilyTag(name)
    except ValueError:
        raise DataError(f"Model file names an unknown family '{name}'.")
    return fam.FamilyKind(tag, nu=payload.get("nu"), n_classes=payload.get("n_classes"))


def _beta_from_dict(kind: fam.FamilyKind, payload: Dict[str, Any], j: int) -> fam.EmissionParams:
    where = f"betas[{j}]."
    if kind.uses_precision:
        return fam.PrecisionParams(
            B=_array(_require(payload, "B", where), where + "B"),
            Lam=_array(_require(payload, "Lam", where), where + "Lam"),
        )
    if kind.tag == fam.FamilyTag.LAPLACE:
        return fam.LaplaceParams(
            M=_array(_require(payload, "M", where), where + "M"),
            R=_array(_require(payload, "R", where), where + "R"),
        )
    if kind.tag == fam.FamilyTag.CATEGORICAL:
        return fam.CategoricalParams(Theta=_array(_require(payload, "Theta", where), where + "Theta"))
    return fam.ScalarParams(
        b=_array(_require(payload, "b", where), where + "b"),
        lam=float(_require(payload, "lam", where)),
    )


def model_from_dict(payload: Dict[str, Any]):
    """Inverse of :func:`model_to_dict`; returns ``(model, alpha0, regularizer, provenance)``."""
    version = _require(payload, "version")
    if version != MODEL_FILE_VERSION:
        raise DataError(f"Unsupported model file version {version!r}.")
    try:
        structure = SwitchStructure.parse(_require(payload, "structure"))
        kind = _family_from_dict(_require(payload, "family"))
        lags = _require(payload, "regressor")
        cfg = RegressorConfig(
            t_y=_require(lags, "t_y", "regressor."),
            t_u=_require(lags, "t_u", "regressor."),
            include_bias=bool(_require(lags, "bias", "regressor.")),
        )
        betas = [_beta_from_dict(kind, beta, j) for j, beta in enumerate(_require(payload, "betas"))]
        if len(betas) != _require(payload, "d"):
            raise DataError(f"Model file declares d={payload['d']} but stores {len(betas)} emission blocks.")
        model = ModelParams(
            structure=structure,
            family=kind,
            betas=tuple(betas),
            theta=_array(_require(payload, "theta"), "theta"),
            cfg=cfg,
        )
        alpha0 = check_alpha0(_array(_require(payload, "alpha0"), "alpha0"), model.d)
        reg = Regularizer(**_require(payload, "regularizer"))
    except (ConfigError, DomainError) as exc:
        raise DataError(f"Invalid model file: {exc}") from exc
    except TypeError as exc:
        raise DataError(f"Invalid model file: {exc}") from exc
    return model, alpha0, reg, dict(payload.get("provenance") or {})


def save_model(
    path,
    model: ModelParams,
    alpha0,
    reg: Optional[Regularizer] = None,
    *,
    seed: Optional[int] = None,
    data_hash: Optional[str] = None,
) -> None:
    payload = model_to_dict(model, alpha0, reg, seed=seed, data_hash=data_hash)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def load_model(path):
    path = Path(path)
    with data_source_context(str(path)):
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"Cannot read model file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"Model file is not valid JSON: {exc.msg}", line=exc.lineno) from exc
        if not isinstance(payload, dict):
            raise DataError("Model file must hold a JSON object.")
        return model_from_dict(payload)


# Fit reports


def _regularizer_to_dict(reg: Regularizer) -> Dict[str, float]:
    return {"gamma1": reg.gamma1, "gamma2": reg.gamma2, "gamma3": reg.gamma3}


def report_to_dict(report: FitReport) -> Dict[str, Any]:
    """Serialize a :class:`FitReport` (without the model itself)."""
    return {
        "stop_reason": report.stop_reason.value,
        "final_reg_nll": report.final_reg_nll,
        "final_grad_norm": report.final_grad_norm,
        "validation_nll": report.validation_nll,
        "regularizer": _regularizer_to_dict(report.reg),
        "iterations": [
            {
                "iteration": rec.iteration,
                "reg_nll": rec.reg_nll,
                "grad_norm": rec.grad_norm,
                "e_seconds": rec.e_seconds,
                "m_seconds": rec.m_seconds,
                "param_delta": rec.param_delta,
                "exact": rec.exact,
            }
            for rec in report.iterations
        ],
        "reg_nll_history": list(report.reg_nll_history),
        "best_restart": report.best_restart,
        "restarts": [
            {
                "index": s.index,
                "seed": s.seed,
                "reg_nll": s.reg_nll,
                "validation_nll": s.validation_nll,
                "iterations": s.iterations,
                "stop_reason": None if s.stop_reason is None else s.stop_reason.value,
                "error": s.error,
            }
            for s in report.restarts
        ],
        "grid": [
            {
                "regularizer": _regularizer_to_dict(point["regularizer"]),
                "score": point["score"],
                "error": point["error"],
            }
            for point in report.grid
        ],
    }


def save_report(path, report: FitReport) -> None:
    Path(path).write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True), encoding="utf-8")
