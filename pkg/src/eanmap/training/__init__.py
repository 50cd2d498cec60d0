"""
Matching, losses, and the training loop.

`training.ablation` is imported directly; it depends on
`eanmap.experiment`, which itself imports this package.
"""

from eanmap.training.loss import LossConfig, LossReport, compute_loss
from eanmap.training.matching import Assignment, hungarian_match
from eanmap.training.trainer import TrainConfig, Trainer, load_model, train

__all__ = [
    "Assignment",
    "LossConfig",
    "LossReport",
    "TrainConfig",
    "Trainer",
    "compute_loss",
    "hungarian_match",
    "load_model",
    "train",
]
