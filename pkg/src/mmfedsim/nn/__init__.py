"""Minimal float64 neural-network substrate: layers, losses, gradients, SGD."""
from .layers import Conv1D, Dense, Flatten, MaxPool1D, ReLU
from .losses import (
    cross_entropy_loss,
    kd_loss,
    mean_entropy,
    moon_contrastive_loss,
    softmax,
    supcon_loss,
)
from .model import (
    ArchSpec,
    ForwardResult,
    Gradient,
    LossSpec,
    ModelState,
    OptimizerConfig,
    backward,
    forward,
    init_model,
    sgd_step,
    zero_model,
)

__all__ = [
    "ArchSpec", "Conv1D", "Dense", "Flatten", "ForwardResult", "Gradient", "LossSpec",
    "MaxPool1D", "ModelState", "OptimizerConfig", "ReLU", "backward",
    "cross_entropy_loss", "forward", "init_model", "kd_loss", "mean_entropy",
    "moon_contrastive_loss", "sgd_step", "softmax", "supcon_loss", "zero_model",
]
