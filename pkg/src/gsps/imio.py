"""Image file I/O: PFM float maps and 8/16-bit PNG through OpenCV."""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .errors import DataError, FormatError

PFM_MAX = float(np.finfo(np.float32).max)


def write_pfm(path, image: np.ndarray) -> None:
    """Write a little-endian PFM. +inf is stored as the float32 maximum."""
    a = np.asarray(image, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs an HxW or HxWx3 array, got {a.shape}")
    a = np.where(np.isposinf(a), np.float32(PFM_MAX), a)
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(a)).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM written by :func:`write_pfm`; the float32 maximum reads back as +inf."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            tag = f.readline().strip()
            dims = f.readline().split()
            scale = float(f.readline().strip())
            data = f.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    except ValueError as e:
        raise FormatError(f"{path}: malformed PFM header") from e
    if tag not in (b"PF", b"Pf") or len(dims) != 2:
        raise FormatError(f"{path}: not a PFM file")
    w, h = int(dims[0]), int(dims[1])
    ch = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    if len(data) != w * h * ch * 4:
        raise FormatError(f"{path}: truncated PFM payload")
    a = np.frombuffer(data, dtype=dtype).reshape((h, w, ch) if ch == 3 else (h, w))
    a = np.flipud(a).astype(np.float32)
    a[a == np.float32(PFM_MAX)] = np.inf
    return a


def read_png(path, srgb: bool = False) -> np.ndarray:
    """Read an 8/16-bit PNG as float64 in [0, 1], channels last in RGB order."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: not a readable image")
    img = _to_rgb(img)
    if img.dtype == np.uint8:
        out = img.astype(np.float64) / 255.0
    elif img.dtype == np.uint16:
        out = img.astype(np.float64) / 65535.0
    else:
        raise FormatError(f"{path}: unsupported sample type {img.dtype}")
    if srgb:
        out = np.where(out <= 0.04045, out / 12.92, ((out + 0.055) / 1.055) ** 2.4)
    return out


def read_png_raw(path) -> np.ndarray:
    """Integer samples, RGB order, no scaling."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: not a readable image")
    return _to_rgb(img)


def write_png(path, image: np.ndarray, bits: int = 8) -> None:
    """Write a float image in [0, 1] (or an integer array as-is) as PNG."""
    a = np.asarray(image)
    if a.dtype.kind == "f":
        top = 255 if bits == 8 else 65535
        a = np.round(np.clip(a, 0.0, 1.0) * top).astype(np.uint8 if bits == 8 else np.uint16)
    if a.ndim == 3 and a.shape[2] == 3:
        a = cv2.cvtColor(a, cv2.COLOR_RGB2BGR)
    elif a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if not cv2.imwrite(str(path), a):
        raise OSError(f"cannot write {path}")


def _to_rgb(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[..., :3]
        if img.shape[2] == 3:
            img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    return img

