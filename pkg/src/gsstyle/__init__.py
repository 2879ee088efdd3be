"""Appearance-only style transfer for 3D Gaussian splat scenes.

Pipeline: render dataset views, hand them to an external image editor over a
filesystem job protocol, append the edited images to the training set, and
re-optimize Gaussian colors under photometric + feature-matching losses.
A warp-based evaluator scores multi-view consistency of the result.
"""

__version__ = "0.1.0"

from .scene import CameraView, GaussianPrimitive, GaussianScene, ImageBuffer
from .ply import load_ply, save_ply
from .dataset import load_dataset
from .images import read_image, write_image
from .rasterizer import RenderOptions, render, render_backward, render_batch, project

__all__ = [
    "CameraView",
    "GaussianPrimitive",
    "GaussianScene",
    "ImageBuffer",
    "load_ply",
    "save_ply",
    "load_dataset",
    "read_image",
    "write_image",
    "RenderOptions",
    "render",
    "render_backward",
    "render_batch",
    "project",
]
