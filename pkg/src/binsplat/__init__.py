"""Binary category codes for segmenting 3D Gaussian splatting scenes.

Each Gaussian carries a packed code whose low bits hold the coarsest
level; a pixel's class at level l is the composited code masked to its
first l levels.
"""

from .codec import extract_codes, select_gaussians
from .estimator import BinaryGaussianSegmenter
from .exceptions import (BinsplatError, EmptySceneError, FormatError, LayoutMismatchError,
                         NestingError, NumericError, SamplingError)
from .rasterizer import project, render_class_map, render_features
from .scene import Camera, CodeTable, GaussianScene, LevelLayout, MaskPyramid
from .trainer import TrainConfig, resume, train

__version__ = "0.1.0"

__all__ = [
    "BinaryGaussianSegmenter", "BinsplatError", "Camera", "CodeTable", "EmptySceneError",
    "FormatError", "GaussianScene", "LayoutMismatchError", "LevelLayout", "MaskPyramid",
    "NestingError", "NumericError", "SamplingError", "TrainConfig", "extract_codes",
    "project", "render_class_map", "render_features", "resume", "select_gaussians", "train",
]
