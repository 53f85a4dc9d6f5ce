import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from switchfit.config import load_fit_config
from switchfit.data import Trajectory, load_csv, save_csv
from switchfit.driver import FitReport, grid_fit
from switchfit.errors import ConfigError, DataError, DomainError, EnumerationLimitError, NumericalError
from switchfit.evaluation import (
    Prediction,
    PredictionConfig,
    PredictionMode,
    open_loop_predict,
    r2_per_component,
    r2_score,
    recursive_one_step_predict,
    rmse,
    rmse_per_component,
)
from switchfit.likelihood import ModelParams, simulate
from switchfit.model_io import load_model, save_model, save_report, trajectory_hash


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


# Commands


def _print_iterations(report: FitReport) -> None:
    print(f"{'iter':>5}  {'reg_nll':>22}  {'grad_norm':>11}  {'e_s':>8}  {'m_s':>8}")
    print(f"{0:>5}  {report.reg_nll_history[0]:>22.15g}  {'':>11}  {'':>8}  {'':>8}")
    for rec in report.iterations:
        grad = "" if rec.grad_norm is None else f"{rec.grad_norm:.3e}"
        print(f"{rec.iteration:>5}  {rec.reg_nll:>22.15g}  {grad:>11}  {rec.e_seconds:>8.3f}  {rec.m_seconds:>8.3f}")


def _cmd_fit(args: argparse.Namespace) -> int:
    config = load_fit_config(args.config)
    traj = load_csv(args.data)
    report = grid_fit(
        config.skeleton,
        traj,
        config.regularizers,
        config.options,
        config.split,
        config.fixed_precision,
    )
    _print_iterations(report)
    print(f"stop: {report.stop_reason.value}  restart: {report.best_restart}  reg_nll: {report.final_reg_nll:.15g}")
    if report.validation_nll is not None:
        print(f"validation reg_nll: {report.validation_nll:.15g}")

    out = Path(args.out)
    save_model(
        out,
        report.model,
        report.alpha0,
        report.reg,
        seed=config.options.seed,
        data_hash=trajectory_hash(traj),
    )
    report_path = Path(args.report) if args.report else out.with_name(out.stem + ".report.json")
    save_report(report_path, report)
    print(f"Wrote model: {out}")
    print(f"Wrote report: {report_path}")
    return EXIT_OK


def _cmd_simulate(args: argparse.Namespace) -> int:
    model, alpha0, _, _ = load_model(args.model)
    inputs = None
    if args.inputs:
        source = load_csv(args.inputs)
        if source.u is None:
            raise DataError(f"{args.inputs} has no input columns (u1, u2, ...).")
        inputs = source.u
    traj, modes = simulate(model, args.horizon, alpha0=alpha0, seed=args.seed, inputs=inputs)
    save_csv(Trajectory(y=traj.y, u=traj.u), args.out)
    logger.info("simulated %d steps; mode counts %s", args.horizon, np.bincount(modes, minlength=model.d).tolist())
    print(f"Wrote trajectory: {args.out}")
    return EXIT_OK


def _prediction_config(args: argparse.Namespace) -> PredictionConfig:
    return PredictionConfig(
        mode=PredictionMode(args.mode),
        n_samples=args.samples,
        trim_fraction=args.trim,
        horizon=args.horizon,
        seed=args.seed,
    )


def _predict(model: ModelParams, alpha0, traj: Trajectory, cfg: PredictionConfig, warmup: Optional[int]) -> Prediction:
    if cfg.mode == PredictionMode.RECURSIVE:
        start = 0 if warmup is None else warmup
        stop = traj.T if cfg.horizon is None else start + cfg.horizon
        return recursive_one_step_predict(model, alpha0, traj, cfg, span=(start, stop))

    start = max(1, model.cfg.n_lags()) if warmup is None else warmup
    if not 1 <= start < traj.T:
        raise DataError(f"Warm-up length {start} must lie in [1, {traj.T - 1}].")
    horizon = traj.T - start if cfg.horizon is None else cfg.horizon
    history = traj.segment(0, start, model.cfg)
    inputs = None if traj.u is None else traj.u[start + 1 : start + horizon]
    return open_loop_predict(model, alpha0, history, horizon, cfg, inputs)


def _truth(traj: Trajectory, prediction: Prediction) -> Optional[np.ndarray]:
    if prediction.times[-1] > traj.T:
        return None
    return traj.y[prediction.times]


def _cmd_predict(args: argparse.Namespace) -> int:
    model, alpha0, _, _ = load_model(args.model)
    traj = load_csv(args.data)
    cfg = _prediction_config(args)
    prediction = _predict(model, alpha0, traj, cfg, args.warmup)
    truth = _truth(traj, prediction)

    columns = {"t": prediction.times}
    low_tag, high_tag = (f"q{round(q * 100):02d}" for q in cfg.quantiles)
    for k in range(model.n_y):
        if truth is not None:
            columns[f"y{k + 1}"] = truth[:, k]
        columns[f"y{k + 1}_pred"] = prediction.mean[:, k]
        columns[f"y{k + 1}_{low_tag}"] = prediction.lower[:, k]
        columns[f"y{k + 1}_{high_tag}"] = prediction.upper[:, k]
    pd.DataFrame(columns).to_csv(Path(args.out), index=False, float_format="%.17g", encoding="utf-8")
    print(f"Wrote predictions: {args.out}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    model, alpha0, _, _ = load_model(args.model)
    traj = load_csv(args.data)
    cfg = _prediction_config(args)
    prediction = _predict(model, alpha0, traj, cfg, args.warmup)
    truth = _truth(traj, prediction)
    if truth is None:
        raise DataError(f"Evaluation needs observations up to t={prediction.times[-1]}, data ends at {traj.T}.")
    if args.metric == "r2":
        value, per_component = r2_score(truth, prediction.mean), r2_per_component(truth, prediction.mean)
    else:
        value, per_component = rmse(truth, prediction.mean), rmse_per_component(truth, prediction.mean)
    payload = {
        "metric": args.metric,
        "mode": cfg.mode.value,
        "value": value,
        "per_component": per_component.tolist(),
        "n": int(prediction.times.shape[0]),
        "first_t": int(prediction.times[0]),
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


# Argument parsing


def _add_prediction_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", required=True, help="Model file written by 'fit'.")
    parser.add_argument("--data", required=True, help="Trajectory CSV with y1.. (and u1..) columns.")
    parser.add_argument(
        "--mode",
        choices=[m.value for m in PredictionMode],
        default=PredictionMode.RECURSIVE.value,
        help="Recursive one-step-ahead or open-loop prediction.",
    )
    parser.add_argument(
        "--warmup",
        type=int,
        default=None,
        help=(
            "Number of leading transitions used only to condition the prediction. "
            "Defaults to 0 (recursive) or the regressor lag (open-loop)."
        ),
    )
    parser.add_argument("--horizon", type=int, default=None, help="Number of predicted steps (default: to the end of the data).")
    parser.add_argument("--samples", type=int, default=None, help="Sampled trajectories (default 20 recursive / 500 open-loop).")
    parser.add_argument("--trim", type=float, default=0.01, help="Trim fraction of the open-loop mean.")
    parser.add_argument("--seed", type=int, default=0, help="Sampling seed.")


def _build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="switchfit",
        description="Identify stochastic switching systems from trajectory data and evaluate the fitted models.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log per-iteration progress at INFO level.")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    fit = commands.add_parser("fit", help="Fit a model from a trajectory CSV and a JSON config.")
    fit.add_argument("--data", required=True, help="Trajectory CSV.")
    fit.add_argument("--config", required=True, help="JSON fit configuration.")
    fit.add_argument("--out", required=True, help="Destination model file.")
    fit.add_argument("--report", default=None, help="Destination fit report (default: <out>.report.json).")
    fit.set_defaults(handler=_cmd_fit)

    sim = commands.add_parser("simulate", help="Sample a trajectory from a fitted model.")
    sim.add_argument("--model", required=True, help="Model file written by 'fit'.")
    sim.add_argument("--horizon", type=int, required=True, help="Number of transitions T.")
    sim.add_argument("--seed", type=int, default=0, help="Sampling seed.")
    sim.add_argument("--inputs", default=None, help="CSV whose u1.. columns drive the simulation.")
    sim.add_argument("--out", required=True, help="Destination trajectory CSV.")
    sim.set_defaults(handler=_cmd_simulate)

    predict = commands.add_parser("predict", help="Write predictions and quantile bands to a CSV.")
    _add_prediction_args(predict)
    predict.add_argument("--out", required=True, help="Destination prediction CSV.")
    predict.set_defaults(handler=_cmd_predict)

    evaluate = commands.add_parser("eval", help="Print a prediction metric as JSON.")
    _add_prediction_args(evaluate)
    evaluate.add_argument("--metric", choices=["r2", "rmse"], default="r2", help="Accuracy metric.")
    evaluate.set_defaults(handler=_cmd_eval)
    return parser


def _parse_args(argv: Optional[List[str]]) -> argparse.Namespace:
    return _build_parser().parse_args(argv)


def _failure(exc: Exception) -> Tuple[int, str]:
    if isinstance(exc, (_UsageError, ConfigError)):
        return EXIT_CONFIG, str(exc)
    if isinstance(exc, DataError):
        return EXIT_DATA, str(exc)
    return EXIT_NUMERIC, str(exc)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = _parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.handler(args)
    except (_UsageError, ConfigError, DataError, NumericalError, DomainError, EnumerationLimitError) as exc:
        code, message = _failure(exc)
        print(f"error: {message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
