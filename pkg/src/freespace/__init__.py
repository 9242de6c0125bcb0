"""Desk-scale RGB-D freespace detection toolkit."""

from .config import TrainConfig, train_config_from_mapping
from .data import Box, Decal, Sample, SceneSpec, load_dataset, render
from .fusion import FeaturePair, FusionConfig, FusionParams, hf2b_forward
from .geometry import CameraIntrinsics, DepthImage, NormalMap, PixelSet
from .harness import ablate, evaluate, make_hard_split, make_plain_split, train
from .losses import LossConfig, total_loss
from .model import ModelConfig, build_model, forward, load_state, save_state

__version__ = "0.1.0"

__all__ = [
    "TrainConfig", "train_config_from_mapping",
    "Box", "Decal", "Sample", "SceneSpec", "load_dataset", "render",
    "FeaturePair", "FusionConfig", "FusionParams", "hf2b_forward",
    "CameraIntrinsics", "DepthImage", "NormalMap", "PixelSet",
    "ablate", "evaluate", "make_hard_split", "make_plain_split", "train",
    "LossConfig", "total_loss",
    "ModelConfig", "build_model", "forward", "load_state", "save_state",
    "__version__",
]
