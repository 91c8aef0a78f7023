"""Synthetic-data training, evaluation and scan benchmarking."""

from .data import SyntheticTask
from .optim import AdamState, NonFiniteGradient, adamw_step, lr_schedule, scaled_lr
from .train import (
    COMPARE_TRAIN,
    MICRO_TARGET_ACCURACY,
    MICRO_TRAIN,
    MIXER_GAP_BAND,
    MIXER_GAP_BASELINE,
    CompareReport,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    TransformerConfig,
    compare_mixers,
    train,
)

__all__ = [
    "AdamState", "COMPARE_TRAIN", "CompareReport", "MICRO_TARGET_ACCURACY", "MICRO_TRAIN",
    "MIXER_GAP_BAND", "MIXER_GAP_BASELINE", "NonFiniteGradient",
    "SyntheticTask", "TrainConfig", "TrainResult", "TrainingDiverged", "TransformerConfig",
    "adamw_step", "compare_mixers", "lr_schedule", "scaled_lr", "train",
]
