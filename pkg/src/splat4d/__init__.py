"""Deformable Gaussian splatting from freeze-time and reference videos, in numpy."""
from .camera import CameraPose, PoseDelta
from .rasterizer import Image, render
from .scene import DeformationOffsets, GaussianCloud

__all__ = ["CameraPose", "PoseDelta", "DeformationOffsets", "GaussianCloud", "Image", "render"]
__version__ = "0.1.0"
