"""Calibrated photometric stereo by optimizing 2D surfel Gaussians through a differentiable splatting renderer."""

__version__ = "0.1.0"

from .core import Camera, Light, SplatScene, SurfelGaussian, gaussian_weight, surfel_normal, surfel_point
from .errors import DataError, FormatError, GSPSError, NumericError, ParameterError
from .ingest import ImageStack, init_scene, load_diligent, synth_scene
from .rasterizer import RenderBuffers, render

__all__ = [
    "Camera", "Light", "SplatScene", "SurfelGaussian", "gaussian_weight", "surfel_normal", "surfel_point",
    "DataError", "FormatError", "GSPSError", "NumericError", "ParameterError",
    "ImageStack", "init_scene", "load_diligent", "synth_scene", "RenderBuffers", "render",
]
