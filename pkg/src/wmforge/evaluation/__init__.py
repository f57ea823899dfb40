"""Metrics, calibration and the scenario-matrix runner."""

from wmforge.evaluation.config import ExperimentConfig, load_config
from wmforge.evaluation.matrix import ExperimentResult, RowResult, aggregate, run_matrix
from wmforge.evaluation.metrics import calibrate, psnr, ssim, tpr_at_fpr

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "RowResult",
    "aggregate",
    "calibrate",
    "load_config",
    "psnr",
    "run_matrix",
    "ssim",
    "tpr_at_fpr",
]
