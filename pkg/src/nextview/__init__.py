"""Desk-scale next-scale autoregressive novel view synthesis."""

__version__ = "0.1.0"

from .conditioning import CameraSpec, PoseSpec, pose_features, relative_pose
from .numerics import Rng
from .sampler import SampleConfig, generate, generate_uncached
from .tokenizer import MultiScaleVQVAE, ScaleSchedule, TokenPyramid
from .transformer import ModelConfig, NextScaleModel, build_layout, build_mask

__all__ = [
    "CameraSpec",
    "ModelConfig",
    "MultiScaleVQVAE",
    "NextScaleModel",
    "PoseSpec",
    "Rng",
    "SampleConfig",
    "ScaleSchedule",
    "TokenPyramid",
    "build_layout",
    "build_mask",
    "generate",
    "generate_uncached",
    "pose_features",
    "relative_pose",
]
