"""Crowd counting by density-map regression with multi-scale feature aggregation."""

__version__ = "0.1.0"

from . import data, evaluation, losses, manifest, model, training, visualize  # noqa: F401
from .losses import LossConfig, euclidean_loss, la_loss_window, pooling_loss, total_loss
from .model import ModelConfig, MsfaNet, init_parameters
from .training import TrainConfig, train

__all__ = [
    "LossConfig", "ModelConfig", "MsfaNet", "TrainConfig", "euclidean_loss",
    "init_parameters", "la_loss_window", "pooling_loss", "total_loss", "train",
]
