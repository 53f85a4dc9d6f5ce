from switchfit.data import DatasetSplit, RegressorConfig, Trajectory, load_csv, save_csv
from switchfit.driver import FitOptions, FitReport, ModelSkeleton, fit, grid_fit, initialize, multistart_fit
from switchfit.errors import (
    ConfigError,
    DataError,
    DomainError,
    EnumerationLimitError,
    MonotonicityError,
    NumericalError,
    SolverWarning,
    SwitchFitError,
)
from switchfit.evaluation import (
    PredictionConfig,
    PredictionMode,
    open_loop_predict,
    r2_score,
    recursive_one_step_predict,
    rmse,
    trimmed_mean,
)
from switchfit.families import FamilyKind, FamilyTag
from switchfit.likelihood import ModelParams, Regularizer, SwitchStructure, nll, reg_nll, simulate
from switchfit.model_io import load_model, save_model
from switchfit.posterior import Posteriors, e_step, forward_backward

__all__ = [
    "ConfigError",
    "DataError",
    "DatasetSplit",
    "DomainError",
    "EnumerationLimitError",
    "FamilyKind",
    "FamilyTag",
    "FitOptions",
    "FitReport",
    "ModelParams",
    "ModelSkeleton",
    "MonotonicityError",
    "NumericalError",
    "Posteriors",
    "PredictionConfig",
    "PredictionMode",
    "RegressorConfig",
    "Regularizer",
    "SolverWarning",
    "SwitchFitError",
    "SwitchStructure",
    "Trajectory",
    "e_step",
    "fit",
    "forward_backward",
    "grid_fit",
    "initialize",
    "load_csv",
    "load_model",
    "multistart_fit",
    "nll",
    "open_loop_predict",
    "r2_score",
    "recursive_one_step_predict",
    "reg_nll",
    "rmse",
    "save_csv",
    "save_model",
    "simulate",
    "trimmed_mean",
]
