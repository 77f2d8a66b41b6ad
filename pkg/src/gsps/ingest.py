"""Data ingestion: DiliGenT-layout datasets, analytic synthetic scenes, scene initialization."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imio
from .core import Camera, Light, SplatScene
from .errors import DataError, FormatError, ParameterError

log = logging.getLogger(__name__)

SHAPES = ("sphere", "plane", "sphere_over_plane")

# Synthetic geometry, in scene units. The orthographic synthetic camera spans
# SYNTH_FRAME units across the image and sits at z = SYNTH_CAMERA_Z.
SYNTH_FRAME = 2.5
SYNTH_CAMERA_Z = 5.0
SPHERE = {"sphere": (np.zeros(3), 1.0), "sphere_over_plane": (np.array([0.0, 0.0, 0.9]), 0.6)}


@dataclass(eq=False)
class ImageStack:
    """N observations of one fixed view under known directional lights.

    ``images`` has shape (N, H, W, C) with C in {1, 3}, linear intensity
    normalized so that each light has unit strength. ``calibration`` keeps the
    per-light rgb intensities that were divided out at load time. ``depth``
    and ``shadows`` are analytic extras only synthetic scenes provide.
    """

    images: np.ndarray
    lights: list[Light]
    mask: np.ndarray
    gt_normals: np.ndarray | None = None
    calibration: np.ndarray | None = None
    depth: np.ndarray | None = None
    shadows: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float64)
        if imgs.ndim == 3:
            imgs = imgs[..., None]
        if imgs.ndim != 4 or imgs.shape[-1] not in (1, 3):
            raise ParameterError(f"images must be (N, H, W, 1|3), got {imgs.shape}")
        self.images = imgs
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != imgs.shape[1:3]:
            raise ParameterError(f"mask shape {self.mask.shape} != image shape {imgs.shape[1:3]}")
        if len(self.lights) != len(imgs):
            raise ParameterError(f"{len(imgs)} images but {len(self.lights)} lights")
        if len(imgs) < 3:
            log.warning("only %d images: fewer than the 3 needed by the least-squares baseline", len(imgs))
        if self.gt_normals is not None:
            gt = np.asarray(self.gt_normals, dtype=np.float64)
            if gt.shape != self.mask.shape + (3,):
                raise ParameterError("gt_normals resolution must match the images")
            if np.any(np.abs(np.linalg.norm(gt[self.mask], axis=-1) - 1) > 1e-3):
                raise FormatError("ground-truth normals are not unit length on the mask")
            self.gt_normals = gt

    def __len__(self) -> int:
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def rgb(self) -> np.ndarray:
        """Images broadcast to three channels, shape (N, H, W, 3)."""
        return np.broadcast_to(self.images, self.images.shape[:3] + (3,))

    def light_matrix(self) -> np.ndarray:
        return np.array([l.direction for l in self.lights])

    def max_image(self) -> np.ndarray:
        """Per-pixel, per-channel maximum over the observations, (H, W, 3)."""
        return self.rgb().max(axis=0)


def default_lights(n: int) -> list[Light]:
    """``n`` deterministic lights on two rings (35 and 55 degrees off the view axis)."""
    lights = []
    for i in range(n):
        polar = math.radians(35.0 if i % 2 == 0 else 55.0)
        az = 2 * math.pi * i / max(n, 1) + 0.3
        lights.append(Light.from_vector([math.sin(polar) * math.cos(az), math.sin(polar) * math.sin(az),
                                         math.cos(polar)]))
    return lights


def synth_camera(resolution: int) -> Camera:
    return Camera.orthographic(resolution, resolution, SYNTH_FRAME / resolution,
                               position=(0.0, 0.0, SYNTH_CAMERA_Z))


def synth_geometry(shape: str, resolution: int):
    """Analytic surface seen by the synthetic camera.

    Returns (mask, normals, depth, points, on_sphere) where ``depth`` is the
    ray parameter of the visible surface point.
    """
    if shape not in SHAPES:
        raise ParameterError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    cam = synth_camera(resolution)
    o, _ = cam.rays()
    X, Y = o[..., 0], o[..., 1]
    n = np.zeros(X.shape + (3,))
    z = np.zeros(X.shape)
    if shape == "plane":
        mask = np.ones(X.shape, bool)
        on_sphere = np.zeros(X.shape, bool)
        n[..., 2] = 1.0
    else:
        c, r = SPHERE[shape]
        rho2 = (X - c[0]) ** 2 + (Y - c[1]) ** 2
        on_sphere = rho2 < r * r
        h = np.sqrt(np.maximum(r * r - rho2, 0.0))
        n[on_sphere] = np.stack([X - c[0], Y - c[1], h], axis=-1)[on_sphere] / r
        z = np.where(on_sphere, c[2] + h, 0.0)
        if shape == "sphere":
            mask = on_sphere
        else:
            mask = np.ones(X.shape, bool)
            n[~on_sphere] = (0.0, 0.0, 1.0)
    points = np.stack([X, Y, z], axis=-1)
    depth = np.where(mask, SYNTH_CAMERA_Z - z, np.inf)
    return mask, n, depth, points, on_sphere


def raycast_shadows(shape: str, points: np.ndarray, on_sphere: np.ndarray, light: Light) -> np.ndarray:
    """Cast-shadow oracle: does the ray from each point toward the light hit the geometry?"""
    if shape != "sphere_over_plane":
        return np.zeros(points.shape[:-1], bool)
    c, r = SPHERE[shape]
    l = light.direction
    oc = points - c
    b = oc @ l
    cc = np.sum(oc * oc, axis=-1) - r * r
    disc = b * b - cc
    s_far = -b + np.sqrt(np.maximum(disc, 0.0))
    # plane points only: the sphere is convex and floats above the plane
    return (~on_sphere) & (disc > 0) & (s_far > 1e-9) & (l[2] > 0)


def synth_scene(shape: str, lights: list[Light], resolution: int, albedo=1.0) -> ImageStack:
    """Render a Lambertian scene analytically (point-sampled at pixel centers)."""
    if resolution < 16:
        raise ParameterError(f"resolution must be at least 16, got {resolution}")
    if shape not in SHAPES:
        raise ParameterError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    rho = np.atleast_1d(np.asarray(albedo, dtype=np.float64))
    if rho.size not in (1, 3) or np.any(rho < 0):
        raise ParameterError("albedo must be a non-negative scalar or rgb triple")
    mask, normals, depth, points, on_sphere = synth_geometry(shape, resolution)
    images, shadows = [], []
    for light in lights:
        shade = np.maximum(0.0, normals @ light.direction)
        cast = raycast_shadows(shape, points, on_sphere, light)
        shade = np.where(mask & ~cast, shade, 0.0)
        inten = light.intensity if rho.size == 3 else light.intensity[:1]
        images.append(shade[..., None] * rho * inten)
        shadows.append(cast)
    meta = {"shape": shape, "albedo": rho.tolist(), "camera": synth_camera(resolution).to_dict()}
    return ImageStack(np.array(images), list(lights), mask, np.where(mask[..., None], normals, 0.0),
                      depth=depth, shadows=np.array(shadows), meta=meta)


def surfels_from_geometry(shape: str, resolution: int, density: float = 1.0) -> SplatScene:
    """Opaque surfels sampled over the full analytic surface (both sphere hemispheres).

    Used to exercise shadow mapping on exact geometry: unlike a camera-side
    reconstruction, it also contains the parts hidden from the camera.
    """
    cam = synth_camera(resolution)
    pitch = cam.pixel_pitch / density
    centers, normals = [], []
    if shape in ("plane", "sphere_over_plane"):
        half = SYNTH_FRAME / 2 + 4 * pitch
        g = np.arange(-half + pitch / 2, half, pitch)
        X, Y = np.meshgrid(g, g)
        centers.append(np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1))
        normals.append(np.tile([0.0, 0.0, 1.0], (X.size, 1)))
    if shape in SPHERE:
        c, r = SPHERE[shape]
        n = int(math.ceil(4 * math.pi * r * r / pitch ** 2))
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = math.pi * (1 + 5 ** 0.5) * i
        dirs = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
        centers.append(c + r * dirs)
        normals.append(dirs)
    if not centers:
        raise ParameterError(f"unknown shape {shape!r}")
    centers, normals = np.concatenate(centers), np.concatenate(normals)
    helper = np.where(np.abs(normals[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    tu = np.cross(helper, normals)
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(normals, tu)
    k = len(centers)
    s = np.full(k, 0.6 * pitch)
    return SplatScene(centers, tu, tv, s, s.copy(), np.ones(k), np.ones((k, 3)), cam, cam.pixel_pitch)


def init_scene(stack: ImageStack, camera: Camera, opacity: float = 0.5) -> SplatScene:
    """One camera-facing surfel per foreground pixel, placed on the world z = 0 plane.

    Albedo is the per-channel maximum over all observations at that pixel.
    """
    if (camera.height, camera.width) != stack.mask.shape:
        raise ParameterError(f"camera resolution {camera.width}x{camera.height} does not match "
                             f"images {stack.width}x{stack.height}")
    rows, cols = np.nonzero(stack.mask)
    o, d = camera.rays(rows, cols)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[:, 2] / d[:, 2]
    if np.any(~np.isfinite(t)) or np.any(t <= 0):
        raise ParameterError("camera rays do not all reach the z = 0 plane in front of the camera")
    centers = o + t[:, None] * d
    k = len(rows)
    R = camera.orientation
    if camera.model == "orthographic":
        scale = np.full(k, camera.pixel_pitch / 2)
    else:
        scale = t / camera.focal / 2
    albedo = stack.max_image()[rows, cols]
    pitch = camera.footprint(np.median(t)) if k else camera.footprint(1.0)
    return SplatScene(centers, np.tile(R[:, 0], (k, 1)), np.tile(R[:, 1], (k, 1)), scale, scale.copy(),
                      np.full(k, float(opacity)), albedo, camera, pitch)


# ---------------------------------------------------------------------------
# DiliGenT directory layout

def _read_rows(path: Path, ncols: int) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        a = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    if a.size and a.shape[1] != ncols:
        raise FormatError(f"{path}: expected {ncols} columns per row, got {a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise FormatError(f"{path}: non-finite values")
    return a


def load_diligent(directory, srgb: bool = False) -> ImageStack:
    """Load a DiliGenT-style object directory.

    Expects ``filenames.txt``, ``light_directions.txt``, ``light_intensities.txt``
    (rgb, one row per image), ``mask.png`` and the listed images; optional
    ground truth as ``normal.txt`` (H*W rows, row-major) or ``Normal_gt.png``.
    Light directions are in camera coordinates (x right, y up, z toward the
    camera). Images are divided by their light's rgb intensity.
    """
    from .metrics import decode_normal_png

    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"missing dataset directory: {d}")
    fn_path = d / "filenames.txt"
    if not fn_path.is_file():
        raise DataError(f"missing file: {fn_path}")
    names = [ln.strip() for ln in fn_path.read_text().splitlines() if ln.strip()]
    dirs = _read_rows(d / "light_directions.txt", 3)
    ints = _read_rows(d / "light_intensities.txt", 3)
    if not (len(names) == len(dirs) == len(ints)):
        raise FormatError(f"row count mismatch: {len(names)} filenames, {len(dirs)} light directions, "
                          f"{len(ints)} light intensities")
    if len(names) == 0:
        raise FormatError(f"{fn_path}: no images listed")
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(norms < 1e-9):
        raise FormatError(f"{d / 'light_directions.txt'}: zero-length light direction")
    if np.any(ints <= 0):
        raise FormatError(f"{d / 'light_intensities.txt'}: intensities must be positive")
    mask_img = imio.read_png(d / "mask.png")
    mask = mask_img.reshape(mask_img.shape[:2] + (-1,)).max(axis=-1) > 0
    if not mask.any():
        raise DataError(f"{d / 'mask.png'}: empty foreground")

    images, depths = [], set()
    for name in names:
        raw = imio.read_png_raw(d / name) if (d / name).is_file() else None
        if raw is None:
            raise DataError(f"missing file: {d / name}")
        depths.add(raw.dtype.itemsize * 8)
        img = imio.read_png(d / name, srgb=srgb)
        if img.ndim == 2:
            img = img[..., None]
        if img.shape[:2] != mask.shape:
            raise FormatError(f"{d / name}: resolution {img.shape[1]}x{img.shape[0]} differs from mask "
                              f"{mask.shape[1]}x{mask.shape[0]}")
        images.append(img)
    if len({im.shape for im in images}) != 1:
        raise FormatError("images have inconsistent channel counts")
    images = np.array(images)
    scale = ints if images.shape[-1] == 3 else ints.mean(axis=1, keepdims=True)
    images = images / scale[:, None, None, :]

    gt = None
    if (d / "normal.txt").is_file():
        g = _read_rows(d / "normal.txt", 3)
        if len(g) != mask.size:
            raise FormatError(f"{d / 'normal.txt'}: expected {mask.size} rows, got {len(g)}")
        gt = np.where(mask[..., None], g.reshape(mask.shape + (3,)), 0.0)
    elif (d / "Normal_gt.png").is_file():
        g = decode_normal_png(d / "Normal_gt.png")
        if g.shape[:2] != mask.shape:
            raise FormatError(f"{d / 'Normal_gt.png'}: resolution differs from mask")
        gt = np.where(mask[..., None], g, 0.0)
    if gt is not None and np.any(np.abs(np.linalg.norm(gt[mask], axis=-1) - 1) > 1e-3):
        raise FormatError(f"{d}: ground-truth normals are not unit length on the mask")

    lights = [Light(v / n) for v, n in zip(dirs, norms)]
    meta = {"source": str(d), "filenames": names, "bit_depth": max(depths), "srgb": srgb}
    synth_meta = d / "synth.json"
    if synth_meta.is_file():
        meta["synth"] = json.loads(synth_meta.read_text())
    return ImageStack(images, lights, mask, gt, calibration=ints, meta=meta)


def save_diligent(stack: ImageStack, directory, bits: int = 16) -> Path:
    """Write ``stack`` in the DiliGenT layout that :func:`load_diligent` reads."""
    from .metrics import encode_normal_png

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    # loaded stacks were divided by their calibration; synthetic ones hold raw intensities
    normalized = stack.calibration is not None
    calib = stack.calibration if normalized else np.array([l.intensity for l in stack.lights])
    names = []
    for i, img in enumerate(stack.images):
        name = f"{i + 1:03d}.png"
        scale = (calib[i] if img.shape[-1] == 3 else calib[i].mean(keepdims=True)) if normalized else 1.0
        imio.write_png(d / name, img * scale, bits=bits)
        names.append(name)
    (d / "filenames.txt").write_text("\n".join(names) + "\n")
    np.savetxt(d / "light_directions.txt", stack.light_matrix(), fmt="%.17g")
    np.savetxt(d / "light_intensities.txt", calib, fmt="%.17g")
    imio.write_png(d / "mask.png", stack.mask.astype(np.uint8) * 255)
    if stack.gt_normals is not None:
        np.savetxt(d / "normal.txt", stack.gt_normals.reshape(-1, 3), fmt="%.17g")
        encode_normal_png(d / "Normal_gt.png", stack.gt_normals, stack.mask, bits=16)
    if stack.depth is not None:
        imio.write_pfm(d / "depth_gt.pfm", stack.depth)
    if stack.shadows is not None:
        for i, s in enumerate(stack.shadows):
            imio.write_png(d / f"shadow_{i + 1:03d}.png", s.astype(np.uint8) * 255)
    if "shape" in stack.meta:
        (d / "synth.json").write_text(json.dumps(stack.meta, indent=2))
    return d
