"""Lambertian shading of splatted buffers, with attached and (optionally) cast shadows."""
from __future__ import annotations

import numpy as np

from .core import Light
from .errors import ParameterError
from .rasterizer import RenderBuffers

NORMAL_EPS = 1e-6


def unit_normals(normal: np.ndarray, eps: float = NORMAL_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Renormalize blended normals; returns (unit normals, norms). Short normals become 0."""
    norm = np.linalg.norm(normal, axis=-1)
    ok = norm > eps
    return np.where(ok[..., None], normal / np.where(ok, norm, 1.0)[..., None], 0.0), norm


def lambert(premultiplied_albedo: np.ndarray, normal: np.ndarray, light: Light) -> np.ndarray:
    """``albedo * alpha * intensity * max(0, l . n_hat)`` from premultiplied albedo."""
    nh, _ = unit_normals(normal)
    cos = np.maximum(0.0, nh @ light.direction)
    return premultiplied_albedo * light.intensity * cos[..., None]


def shade(buffers: RenderBuffers, light: Light) -> np.ndarray:
    """Predicted (H, W, 3) image of ``buffers`` under ``light``."""
    nh, _ = unit_normals(buffers.normal)
    cos = np.maximum(0.0, nh @ light.direction)
    return buffers.albedo * light.intensity * (cos * buffers.alpha)[..., None]


def shade_with_shadow(buffers: RenderBuffers, light: Light, shadow_mask: np.ndarray) -> np.ndarray:
    shadow_mask = np.asarray(shadow_mask, bool)
    if shadow_mask.shape != buffers.shape:
        raise ParameterError(f"shadow mask {shadow_mask.shape} does not match buffers {buffers.shape}")
    return np.where(shadow_mask[..., None], 0.0, shade(buffers, light))
