"""Angular-error evaluation and normal-map serialization."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import imio
from .errors import DataError, FormatError, ParameterError

# Error colormap anchors (RGB, 8-bit), evenly spaced from 0 to max_degrees:
# dark blue, cyan, green, yellow, red. The middle anchor is the exact midpoint.
PALETTE = np.array([
    [0, 0, 143],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
], dtype=np.float64)


def _unit(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    ok = norm[..., 0] > 0
    return np.where(ok[..., None], n / np.where(norm > 0, norm, 1.0), 0.0), ok


def angular_error_map(estimated: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel angle in degrees between two normal maps; NaN outside ``mask``.

    Both inputs are renormalized. A zero-length normal on the mask scores 90.
    """
    estimated, truth = np.asarray(estimated, float), np.asarray(truth, float)
    mask = np.asarray(mask, bool)
    if estimated.shape != truth.shape or estimated.shape[:2] != mask.shape:
        raise DataError(f"resolution mismatch: {estimated.shape} vs {truth.shape} vs mask {mask.shape}")
    a, ok_a = _unit(estimated)
    b, ok_b = _unit(truth)
    # atan2 keeps small angles accurate where arccos of a rounded cosine does not
    sin = np.linalg.norm(np.cross(a, b), axis=-1)
    err = np.degrees(np.arctan2(sin, np.sum(a * b, axis=-1)))
    err = np.where(ok_a & ok_b, err, 90.0)
    return np.where(mask, err, np.nan)


def mean_angular_error(error_map: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise DataError("empty mask: no pixels to evaluate")
    return float(np.mean(error_map[mask]))


def error_stats(error_map: np.ndarray, mask: np.ndarray) -> dict:
    vals = error_map[np.asarray(mask, bool)]
    if vals.size == 0:
        raise DataError("empty mask: no pixels to evaluate")
    return {
        "mean_angular_error": float(np.mean(vals)),
        "median_angular_error": float(np.median(vals)),
        "rms_angular_error": float(np.sqrt(np.mean(vals ** 2))),
        "pixels": int(vals.size),
    }


def encode_normals(normals: np.ndarray, mask=None, bits: int = 8) -> np.ndarray:
    """RGB = round((n + 1) / 2 * (2^bits - 1)); pixels outside ``mask`` are black."""
    top = 255 if bits == 8 else 65535
    n = np.asarray(normals, dtype=np.float64)
    code = np.round((np.clip(n, -1.0, 1.0) + 1.0) / 2.0 * top)
    if mask is not None:
        code = np.where(np.asarray(mask, bool)[..., None], code, 0)
    return code.astype(np.uint8 if bits == 8 else np.uint16)


def decode_normals(code: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_normals`; all-zero pixels decode to the zero vector."""
    code = np.asarray(code)
    top = 255.0 if code.dtype == np.uint8 else 65535.0
    n = code.astype(np.float64) / top * 2.0 - 1.0
    n, _ = _unit(n)
    return np.where(np.all(code == 0, axis=-1, keepdims=True), 0.0, n)


def encode_normal_png(path, normals: np.ndarray, mask=None, bits: int = 8) -> None:
    imio.write_png(path, encode_normals(normals, mask, bits))


def decode_normal_png(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    code = imio.read_png_raw(path)
    if code.ndim != 3 or code.shape[2] != 3:
        raise FormatError(f"{path}: a normal map needs three channels")
    return decode_normals(code)


def error_colormap(error_map: np.ndarray, max_degrees: float = 30.0) -> np.ndarray:
    """Map degrees to 8-bit RGB through :data:`PALETTE`; NaN pixels are black."""
    if max_degrees <= 0:
        raise ParameterError("max_degrees must be positive")
    e = np.asarray(error_map, dtype=np.float64)
    x = np.clip(np.nan_to_num(e, nan=0.0) / max_degrees, 0.0, 1.0) * (len(PALETTE) - 1)
    lo = np.minimum(np.floor(x).astype(int), len(PALETTE) - 2)
    f = (x - lo)[..., None]
    rgb = PALETTE[lo] * (1 - f) + PALETTE[lo + 1] * f
    rgb = np.where(np.isnan(e)[..., None], 0.0, rgb)
    return np.round(rgb).astype(np.uint8)


def write_metrics(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
