"""Dual-loss (ArcFace + Center Loss) embedding training on NumPy."""

from .config import LOSS_MODES, RunConfig, TrainConfig, load_config
from .errors import DualLossError
from .losses import (ArcFaceParams, ClassCenters, DualLossConfig, LossOutput, arcface_loss, center_loss,
                     cross_entropy, dual_loss, update_centers)
from .metrics import MetricsReport, confusion_matrix, metrics_from_confusion
from .optim import AdamWState, adamw_step, grad_check
from .training import evaluate, embedding_stats, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "LOSS_MODES", "RunConfig", "TrainConfig", "load_config", "DualLossError",
    "ArcFaceParams", "ClassCenters", "DualLossConfig", "LossOutput", "arcface_loss", "center_loss",
    "cross_entropy", "dual_loss", "update_centers", "MetricsReport", "confusion_matrix",
    "metrics_from_confusion", "AdamWState", "adamw_step", "grad_check", "evaluate", "embedding_stats",
    "run_ablation", "train",
]
