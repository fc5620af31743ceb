"""Self-supervised video frame encoder distilled from frozen image teachers.

Stage 1 trains a ViT and two heads to regress teacher class and patch
features. Stage 2 freezes the encoder and adds a FIFO memory of past frames,
memory attention and heads that anticipate future teacher features.
"""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigKeyError, RunConfig
from .estimators import (
    FrameDistiller,
    FrameMemoryModel,
    LabelPropagator,
    LinearProbe,
    NumericError,
    ZeroShotClassifier,
)
from .synthetic import Clip, SpecError, export_clip, generate_clip, load_clip, random_scene
from .teacher import DataError, FeatureCache, SyntheticTeacher

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "Clip",
    "ConfigKeyError",
    "DataError",
    "FeatureCache",
    "FrameDistiller",
    "FrameMemoryModel",
    "LabelPropagator",
    "LinearProbe",
    "NumericError",
    "RunConfig",
    "SpecError",
    "SyntheticTeacher",
    "ZeroShotClassifier",
    "export_clip",
    "generate_clip",
    "load_checkpoint",
    "load_clip",
    "random_scene",
    "save_checkpoint",
]
