"""Cast-shadow detection by shadow mapping over splatted geometry.

A depth map is rendered from an orthographic camera looking along the light
direction. Every foreground camera pixel is lifted to 3D with the camera depth
map, moved into the light camera frame, and compared with the light-view depth
sampled at its projection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, Light, SplatScene, rotation_to
from .errors import ParameterError
from .rasterizer import RenderBuffers, render

MIN_FRAME = 1.0  # smallest light-view frame (scene units)
BIAS_PIXELS = 1.5  # default depth bias in camera pixel pitches


def light_view_camera(light: Light, bounds, resolution: int = 128, margin: float = 0.05) -> Camera:
    """Orthographic camera looking down ``-light.direction`` that frames ``bounds``."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if lo.shape != (3,) or hi.shape != (3,) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ParameterError("scene bounds must be two finite 3-vectors")
    if np.any(hi < lo):
        raise ParameterError("scene bounds are empty")
    R = rotation_to(light.direction)
    center = (lo + hi) / 2
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    q = (corners - center) @ R
    half = max(np.abs(q[:, 0]).max(), np.abs(q[:, 1]).max(), MIN_FRAME / 2) * (1 + margin)
    radius = np.linalg.norm(hi - lo) / 2
    position = center + light.direction * (radius + 1.0)
    return Camera.orthographic(resolution, resolution, 2 * half / resolution, position=position, orientation=R)


def sample_bilinear(image: np.ndarray, col: np.ndarray, row: np.ndarray) -> np.ndarray:
    """Bilinear lookup at pixel-center coordinates; non-finite taps are ignored.

    Returns +inf where no finite tap exists.
    """
    H, W = image.shape
    c0 = np.floor(col).astype(np.int64)
    r0 = np.floor(row).astype(np.int64)
    fc, fr = col - c0, row - r0
    acc = np.zeros(col.shape)
    wsum = np.zeros(col.shape)
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        r = np.clip(r0 + dr, 0, H - 1)
        c = np.clip(c0 + dc, 0, W - 1)
        v = image[r, c]
        ok = np.isfinite(v) & (w > 0)
        acc += np.where(ok, w * np.where(ok, v, 0.0), 0.0)
        wsum += np.where(ok, w, 0.0)
    return np.where(wsum > 0, acc / np.where(wsum > 0, wsum, 1.0), np.inf)


@dataclass(eq=False)
class ShadowResult:
    """Shadow mask plus the four intermediate depth panels.

    ``camera_depth``: depth seen from the camera. ``camera_in_light``: light-frame
    depth of each camera pixel's 3D point. ``light_depth``: depth rendered from
    the light. ``light_in_camera``: light depth resampled at each camera pixel.
    The mask compares the last two camera-space panels.
    """

    mask: np.ndarray
    camera_depth: np.ndarray
    camera_in_light: np.ndarray
    light_depth: np.ndarray
    light_in_camera: np.ndarray
    light_camera: Camera


def _surface_depth(buffers: RenderBuffers) -> np.ndarray:
    return buffers.depth if buffers.median_depth is None else buffers.median_depth


def shadow_map(scene: SplatScene, light: Light, camera_buffers: RenderBuffers, bias: float | None = None,
               light_resolution: int | None = None, tile_size: int = 16, threads: int = 1) -> ShadowResult:
    cam = scene.camera
    if camera_buffers.shape != (cam.height, cam.width):
        raise ParameterError("camera buffers do not match the scene camera")
    if bias is None:
        bias = BIAS_PIXELS * scene.pixel_pitch
    if not bias > 0:
        raise ParameterError("bias must be positive")
    if light_resolution is None:
        light_resolution = 2 * max(cam.width, cam.height)
    lcam = light_view_camera(light, scene.bounds(), light_resolution)
    light_depth = _surface_depth(render(scene, lcam, tile_size=tile_size, threads=threads))

    depth = _surface_depth(camera_buffers)
    valid = (camera_buffers.alpha > 0) & np.isfinite(depth)
    O, D = cam.rays()
    P = O + np.where(valid, depth, 0.0)[..., None] * D
    col, row, t_light = lcam.project(P)
    inside = (col >= 0) & (col <= lcam.width - 1) & (row >= 0) & (row <= lcam.height - 1)
    sampled = np.full(depth.shape, np.inf)
    sel = valid & inside
    sampled[sel] = sample_bilinear(light_depth, col[sel], row[sel])
    mask = sel & (t_light > sampled + bias)
    return ShadowResult(mask, np.where(valid, depth, np.inf), np.where(valid, t_light, np.inf), light_depth,
                        sampled, lcam)


def shadow_mask(scene: SplatScene, light: Light, camera_buffers: RenderBuffers, bias: float | None = None,
                **kw) -> np.ndarray:
    """Boolean (H, W) mask of camera pixels in cast shadow for ``light``."""
    return shadow_map(scene, light, camera_buffers, bias, **kw).mask


def iou(a: np.ndarray, b: np.ndarray, domain: np.ndarray | None = None) -> float:
    if domain is not None:
        a, b = a & domain, b & domain
    union = np.sum(a | b)
    return 1.0 if union == 0 else float(np.sum(a & b) / union)
