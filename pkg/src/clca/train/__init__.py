"""Optimisation, training/evaluation loops and gradient verification."""

from .gradcheck import GradCheckReport, ParamCheck, grad_check, relative_error
from .loop import (
    MetricsRow,
    TrainConfig,
    TrainingError,
    TrainResult,
    evaluate,
    evaluate_model,
    gradient_maxima,
    read_gradtrace,
    read_metrics,
    train,
)
from .optim import AdamWHyper, adamw_step, decays, lr_at

__all__ = [
    "AdamWHyper", "GradCheckReport", "MetricsRow", "ParamCheck", "TrainConfig", "TrainResult",
    "TrainingError", "adamw_step", "decays", "evaluate", "evaluate_model", "grad_check",
    "gradient_maxima", "lr_at", "read_gradtrace", "read_metrics", "relative_error", "train",
]
