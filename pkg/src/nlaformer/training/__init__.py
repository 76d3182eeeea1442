"""Tape autodiff, losses and the training loop."""

from .losses import MetricSet, compute_metrics, discrepancy, loss_joint, loss_result, loss_step_solution
from .optim import AdamState, adam_step, lr_at
from .tape import NonDifferentiableError, Tape, forward_tape, pipeline_from_params, pipeline_params
from .trainer import (
    ETA_GRID,
    LAMBDA_GRID,
    PRESETS,
    SWEEPS,
    NumericDivergence,
    TrainConfig,
    TrainResult,
    init_pipeline,
    make_dataset,
    probe_spec,
    train,
)

__all__ = [
    "MetricSet", "compute_metrics", "discrepancy", "loss_joint", "loss_result", "loss_step_solution",
    "AdamState", "adam_step", "lr_at",
    "NonDifferentiableError", "Tape", "forward_tape", "pipeline_from_params", "pipeline_params",
    "ETA_GRID", "LAMBDA_GRID", "PRESETS", "SWEEPS", "NumericDivergence", "TrainConfig", "TrainResult",
    "init_pipeline", "make_dataset", "probe_spec", "train",
]
