"""Desk-scale neural implicit dense semantic mapping.

A hash-encoded SDF field with color and semantic heads is trained online
from automatically selected keyframes; rendering, meshing, cube-partitioned
map atlases, synthetic scene generation, and evaluation tooling round out
the pipeline. Everything runs on plain numpy.
"""

__version__ = "0.1.0"

from .field import FieldParams, HashGridConfig, field_forward, load_checkpoint, save_checkpoint
from .keyframe_atlas import KeyframePolicy, SubspaceAtlas
from .renderer import CameraIntrinsics, Pose, RenderConfig, render_image, render_ray
from .semantics import Palette, build_palette
from .trainer import TrainConfig, run_training

__all__ = [
    "FieldParams",
    "HashGridConfig",
    "field_forward",
    "load_checkpoint",
    "save_checkpoint",
    "KeyframePolicy",
    "SubspaceAtlas",
    "CameraIntrinsics",
    "Pose",
    "RenderConfig",
    "render_image",
    "render_ray",
    "Palette",
    "build_palette",
    "TrainConfig",
    "run_training",
]
