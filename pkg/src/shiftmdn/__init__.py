"""Probabilistic tabular regression under distributional shift.

Beta-mixture density networks with moment-exchange augmentation,
per-domain empirical calibration, inverse-variance ensembling, and an
uncertainty-focused evaluation suite.
"""

from .augment import MoExConfig
from .betamix import MixtureParams, mixture_mean_var, mixture_nll
from .calibrate import (
    CalibratedSummary,
    ZPool,
    crude_apply,
    crude_apply_batch,
    crude_fit,
    robust_select,
)
from .ensemble import (
    combine_calibrated,
    inverse_variance_combine,
    seed_aggregate,
)
from .errors import (
    ConfigError,
    DataError,
    NumericalError,
    ShiftMdnError,
)
from .experiment import (
    ExperimentConfig,
    evaluate_predictions,
    run_experiment,
    sweep_moex,
    write_predictions_csv,
)
from .ingest import (
    EnvironmentSplit,
    Frame,
    ScalerParams,
    SchemaSpec,
    TimeRule,
    clamp_targets,
    fit_scalers,
    load_external_predictions,
    load_table,
    split_environments,
    transform,
)
from .metrics import MetricsReport, full_report, uncertainty_scores
from .network import (
    NetworkConfig,
    PredictiveSummary,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .optim import TrainConfig, TrainResult, train
from .synth import SynthConfig, generate, write_benchmark

__version__ = "0.1.0"

__all__ = [
    "CalibratedSummary",
    "ConfigError",
    "DataError",
    "EnvironmentSplit",
    "ExperimentConfig",
    "Frame",
    "MetricsReport",
    "MixtureParams",
    "MoExConfig",
    "NetworkConfig",
    "NumericalError",
    "PredictiveSummary",
    "ScalerParams",
    "SchemaSpec",
    "ShiftMdnError",
    "SynthConfig",
    "TimeRule",
    "TrainConfig",
    "TrainResult",
    "ZPool",
    "clamp_targets",
    "combine_calibrated",
    "crude_apply",
    "crude_apply_batch",
    "crude_fit",
    "evaluate_predictions",
    "fit_scalers",
    "full_report",
    "generate",
    "inverse_variance_combine",
    "load_checkpoint",
    "load_external_predictions",
    "load_table",
    "mixture_mean_var",
    "mixture_nll",
    "predict",
    "robust_select",
    "run_experiment",
    "save_checkpoint",
    "seed_aggregate",
    "split_environments",
    "sweep_moex",
    "train",
    "transform",
    "uncertainty_scores",
    "write_benchmark",
    "write_predictions_csv",
]
