"""Desk-scale two-step alternating adaptation of a toy segmentation
transformer to adverse conditions (fog, night, rain, snow)."""

from .config import DataConfig, Hyperparams, ModelConfig, RunConfig, TrainConfig
from .model import FeaturePack, ModelBundle, build_model, load_checkpoint, save_checkpoint

__all__ = [
    "DataConfig",
    "Hyperparams",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "FeaturePack",
    "ModelBundle",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
]

__version__ = "0.1.0"
