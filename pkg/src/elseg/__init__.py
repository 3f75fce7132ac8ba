"""Exponential logarithmic loss and a deeply supervised 3D segmentation network."""
from .elnet import ELNet, NetworkConfig, param_count, paper_config
from .losses import LossConfig, compute_loss, label_weights, soft_dice_per_label
from .optim import Nadam, NadamConfig

__version__ = "0.1.0"

__all__ = [
    "ELNet",
    "LossConfig",
    "Nadam",
    "NadamConfig",
    "NetworkConfig",
    "compute_loss",
    "label_weights",
    "param_count",
    "paper_config",
    "soft_dice_per_label",
]
