"""Depthwise-separable CNN toolkit for 4-class chest X-ray classification."""

from .model import ArchConfig, FreezePolicy, ModelGraph, apply_freeze_policy, build_model, forward_infer
from .tensor import Param, Tensor, backward
from .trainer import EpochLog, TrainConfig, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "EpochLog",
    "FreezePolicy",
    "ModelGraph",
    "Param",
    "Tensor",
    "TrainConfig",
    "apply_freeze_policy",
    "backward",
    "build_model",
    "evaluate",
    "fit",
    "forward_infer",
]
