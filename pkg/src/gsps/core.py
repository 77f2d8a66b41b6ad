"""Scene representation: surfel Gaussians, cameras and directional lights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

# Per-Gaussian parameter arrays of a SplatScene, in canonical order.
PARAM_FIELDS = ("centers", "tangent_u", "tangent_v", "scale_u", "scale_v", "opacity", "albedo")


def _vec3(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise ParameterError(f"{name} must be a 3-vector, got shape {np.shape(x)}")
    return a


@dataclass(eq=False)
class SurfelGaussian:
    """A single 2D Gaussian on a tangent plane."""

    center: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scale_u: float
    scale_v: float
    opacity: float
    albedo: np.ndarray

    def __post_init__(self):
        self.center = _vec3(self.center, "center")
        self.tangent_u = _vec3(self.tangent_u, "tangent_u")
        self.tangent_v = _vec3(self.tangent_v, "tangent_v")
        self.albedo = _vec3(self.albedo, "albedo")
        self.scale_u = float(self.scale_u)
        self.scale_v = float(self.scale_v)
        self.opacity = float(self.opacity)

    def validate(self, tol: float = 1e-6) -> None:
        if abs(np.linalg.norm(self.tangent_u) - 1) > tol or abs(np.linalg.norm(self.tangent_v) - 1) > tol:
            raise ParameterError("tangent vectors must be unit length")
        if abs(self.tangent_u @ self.tangent_v) > tol:
            raise ParameterError("tangent vectors must be orthogonal")
        if not (self.scale_u > 0 and self.scale_v > 0):
            raise ParameterError("scales must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ParameterError("opacity must lie in [0, 1]")
        if np.any(self.albedo < 0):
            raise ParameterError("albedo must be non-negative")


def surfel_normal(g: SurfelGaussian) -> np.ndarray:
    """Plane normal ``t_u x t_v`` (not sign-corrected; see :func:`facing_normals`)."""
    n = np.cross(g.tangent_u, g.tangent_v)
    return n / np.linalg.norm(n)


def surfel_point(g: SurfelGaussian, u: float, v: float) -> np.ndarray:
    return g.center + g.scale_u * g.tangent_u * u + g.scale_v * g.tangent_v * v


def gaussian_weight(u, v):
    """Surfel-space Gaussian ``exp(-(u^2 + v^2) / 2)``; broadcasts over arrays."""
    return np.exp(-0.5 * (np.square(u) + np.square(v)))


def facing_normals(normals: np.ndarray, view_dirs: np.ndarray) -> np.ndarray:
    """Flip normals so that ``n . d < 0`` (pointing back toward the camera)."""
    s = np.where(np.sum(normals * view_dirs, axis=-1) > 0, -1.0, 1.0)
    return normals * s[..., None]


def orthonormalize(tu: np.ndarray, tv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gram-Schmidt on batched tangent pairs, shapes (K, 3).

    A degenerate ``tv`` (parallel to ``tu``) is replaced by an arbitrary
    perpendicular direction.
    """
    tu = tu / np.linalg.norm(tu, axis=-1, keepdims=True)
    tv = tv - np.sum(tv * tu, axis=-1, keepdims=True) * tu
    nv = np.linalg.norm(tv, axis=-1, keepdims=True)
    bad = nv[..., 0] < 1e-12
    if np.any(bad):
        helper = np.where(np.abs(tu[bad, 0:1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
        alt = np.cross(tu[bad], helper)
        alt /= np.linalg.norm(alt, axis=-1, keepdims=True)
        tv[bad] = alt
        nv[bad] = 1.0
    return tu, tv / nv


@dataclass(eq=False)
class Light:
    """Directional light. ``direction`` points from the surface toward the light."""

    direction: np.ndarray
    intensity: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.direction = _vec3(self.direction, "direction")
        inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if inten.size == 1:
            inten = np.repeat(inten, 3)
        if inten.shape != (3,) or np.any(inten < 0):
            raise ParameterError("light intensity must be a non-negative rgb triple")
        self.intensity = inten
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ParameterError(f"light direction must be unit length, got {self.direction}")

    @classmethod
    def from_vector(cls, v, intensity=1.0) -> "Light":
        v = _vec3(v, "direction")
        return cls(v / np.linalg.norm(v), intensity)


@dataclass(eq=False)
class Camera:
    """Orthographic or pinhole camera looking down its local -z axis.

    Local frame: x to the right of the image, y up, z toward the viewer.
    ``orientation`` maps camera-frame vectors to world. Pixel ``(row, col)``
    has its center at image coordinate ``(col + 0.5, row + 0.5)``.

    For ``pinhole`` rays are scaled so their local z component is -1, making
    the ray parameter equal to the camera-space depth.
    """

    model: str
    width: int
    height: int
    position: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 5.0]))
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    pixel_pitch: float = 1.0
    focal: float = 1.0
    principal: tuple[float, float] | None = None

    def __post_init__(self):
        if self.model not in ("orthographic", "pinhole"):
            raise ParameterError(f"unknown camera model {self.model!r}")
        self.width, self.height = int(self.width), int(self.height)
        if self.width < 1 or self.height < 1:
            raise ParameterError("camera resolution must be at least 1x1")
        self.position = _vec3(self.position, "position")
        R = np.asarray(self.orientation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ParameterError("orientation must be a 3x3 matrix")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ParameterError("orientation must be a proper rotation")
        self.orientation = R
        self.pixel_pitch = float(self.pixel_pitch)
        self.focal = float(self.focal)
        if self.principal is None:
            self.principal = (self.width / 2.0, self.height / 2.0)
        self.principal = (float(self.principal[0]), float(self.principal[1]))
        if self.model == "orthographic" and self.pixel_pitch <= 0:
            raise ParameterError("pixel pitch must be positive")
        if self.model == "pinhole" and self.focal <= 0:
            raise ParameterError("focal length must be positive")

    @classmethod
    def orthographic(cls, width, height, pixel_pitch, position=(0.0, 0.0, 5.0), orientation=None) -> "Camera":
        return cls("orthographic", width, height, np.asarray(position, float),
                   np.eye(3) if orientation is None else orientation, pixel_pitch=pixel_pitch)

    @classmethod
    def pinhole(cls, width, height, focal, position=(0.0, 0.0, 5.0), orientation=None, principal=None) -> "Camera":
        return cls("pinhole", width, height, np.asarray(position, float),
                   np.eye(3) if orientation is None else orientation, focal=focal, principal=principal)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    @property
    def view_axis(self) -> np.ndarray:
        """World-space viewing direction (camera -z)."""
        return -self.orientation[:, 2]

    def local_rays(self, rows=None, cols=None):
        """Camera-frame ray origins and directions for the given pixels.

        With no arguments, returns full (H, W, 3) grids.
        """
        if rows is None:
            rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        x = np.asarray(cols, dtype=np.float64) + 0.5
        y = np.asarray(rows, dtype=np.float64) + 0.5
        zeros = np.zeros_like(x)
        if self.model == "orthographic":
            o = np.stack([(x - self.width / 2.0) * self.pixel_pitch,
                          -(y - self.height / 2.0) * self.pixel_pitch, zeros], axis=-1)
            d = np.stack([zeros, zeros, zeros - 1.0], axis=-1)
        else:
            cx, cy = self.principal
            o = np.stack([zeros, zeros, zeros], axis=-1)
            d = np.stack([(x - cx) / self.focal, -(y - cy) / self.focal, zeros - 1.0], axis=-1)
        return o, d

    def rays(self, rows=None, cols=None):
        """World-space ray origins and directions, ``r(t) = o + t d``."""
        o, d = self.local_rays(rows, cols)
        R = self.orientation
        return o @ R.T + self.position, d @ R.T

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.position) @ self.orientation

    def project(self, points: np.ndarray):
        """World points -> (col, row, t) in pixel-center coordinates.

        Pixel ``j`` has its center at ``col == j``. ``t`` is the ray parameter.
        """
        q = self.to_local(points)
        t = -q[..., 2]
        if self.model == "orthographic":
            col = q[..., 0] / self.pixel_pitch + self.width / 2.0 - 0.5
            row = -q[..., 1] / self.pixel_pitch + self.height / 2.0 - 0.5
        else:
            cx, cy = self.principal
            with np.errstate(divide="ignore", invalid="ignore"):
                col = self.focal * q[..., 0] / t + cx - 0.5
                row = -self.focal * q[..., 1] / t + cy - 0.5
        return col, row, t

    def footprint(self, t=None) -> float:
        """Scene-unit size of one pixel at ray parameter ``t``."""
        if self.model == "orthographic":
            return self.pixel_pitch
        return float(t) / self.focal

    def to_dict(self) -> dict:
        return {
            "model": self.model, "width": self.width, "height": self.height,
            "position": self.position.tolist(), "orientation": self.orientation.tolist(),
            "pixel_pitch": self.pixel_pitch, "focal": self.focal, "principal": list(self.principal),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["model"], d["width"], d["height"], np.array(d["position"]), np.array(d["orientation"]),
                   pixel_pitch=d["pixel_pitch"], focal=d["focal"], principal=tuple(d["principal"]))


@dataclass(eq=False)
class SplatScene:
    """Structure-of-arrays container for K surfels plus densification statistics.

    ``grad_accum``/``grad_count`` hold the accumulated positional-gradient
    norm and the number of accumulated updates; ``grad_dir`` the summed
    positional gradient vector (used to orient clones).
    """

    centers: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scale_u: np.ndarray
    scale_v: np.ndarray
    opacity: np.ndarray
    albedo: np.ndarray
    camera: Camera
    pixel_pitch: float = 1.0
    grad_accum: np.ndarray | None = None
    grad_count: np.ndarray | None = None
    grad_dir: np.ndarray | None = None

    def __post_init__(self):
        k = len(np.asarray(self.scale_u).reshape(-1))
        for name in PARAM_FIELDS:
            a = np.array(getattr(self, name), dtype=np.float64)
            shape = (k, 3) if name in ("centers", "tangent_u", "tangent_v", "albedo") else (k,)
            setattr(self, name, a.reshape(shape))
        if self.grad_accum is None:
            self.reset_densify_stats()
        if not (len(self.grad_accum) == len(self.grad_count) == len(self.grad_dir) == k):
            raise ParameterError("densify statistics must match the number of Gaussians")

    @classmethod
    def from_gaussians(cls, gaussians, camera: Camera, pixel_pitch: float | None = None) -> "SplatScene":
        gs = list(gaussians)
        if pixel_pitch is None:
            pixel_pitch = camera.footprint(np.linalg.norm(camera.position))
        if not gs:
            return cls.empty(camera, pixel_pitch)
        return cls(
            np.array([g.center for g in gs]), np.array([g.tangent_u for g in gs]),
            np.array([g.tangent_v for g in gs]), np.array([g.scale_u for g in gs]),
            np.array([g.scale_v for g in gs]), np.array([g.opacity for g in gs]),
            np.array([g.albedo for g in gs]), camera, pixel_pitch,
        )

    @classmethod
    def empty(cls, camera: Camera, pixel_pitch: float = 1.0) -> "SplatScene":
        z3, z1 = np.zeros((0, 3)), np.zeros(0)
        return cls(z3, z3, z3, z1, z1, z1, z3, camera, pixel_pitch)

    def __len__(self) -> int:
        return len(self.scale_u)

    def __getitem__(self, k: int) -> SurfelGaussian:
        return SurfelGaussian(self.centers[k], self.tangent_u[k], self.tangent_v[k], self.scale_u[k],
                              self.scale_v[k], self.opacity[k], self.albedo[k])

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    @property
    def gaussians(self) -> list[SurfelGaussian]:
        return list(self)

    def normals(self) -> np.ndarray:
        n = np.cross(self.tangent_u, self.tangent_v)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "SplatScene":
        return SplatScene(*(getattr(self, n).copy() for n in PARAM_FIELDS), camera=self.camera,
                          pixel_pitch=self.pixel_pitch, grad_accum=self.grad_accum.copy(),
                          grad_count=self.grad_count.copy(), grad_dir=self.grad_dir.copy())

    def take(self, index) -> "SplatScene":
        """New scene holding the Gaussians at ``index`` (array or mask), stats included."""
        return SplatScene(*(getattr(self, n)[index] for n in PARAM_FIELDS), camera=self.camera,
                          pixel_pitch=self.pixel_pitch, grad_accum=self.grad_accum[index],
                          grad_count=self.grad_count[index], grad_dir=self.grad_dir[index])

    def reset_densify_stats(self) -> None:
        k = len(self)
        self.grad_accum = np.zeros(k)
        self.grad_count = np.zeros(k, dtype=np.int64)
        self.grad_dir = np.zeros((k, 3))

    def bounds(self, pad_sigma: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box around all surfels including ``pad_sigma`` extents."""
        if len(self) == 0:
            raise ParameterError("empty scene has no bounds")
        ext = pad_sigma * (np.abs(self.tangent_u) * self.scale_u[:, None]
                           + np.abs(self.tangent_v) * self.scale_v[:, None])
        return (self.centers - ext).min(axis=0), (self.centers + ext).max(axis=0)

    def validate(self, tol: float = 1e-6) -> None:
        nu = np.linalg.norm(self.tangent_u, axis=1)
        nv = np.linalg.norm(self.tangent_v, axis=1)
        if np.any(np.abs(nu - 1) > tol) or np.any(np.abs(nv - 1) > tol):
            raise ParameterError("tangent vectors must be unit length")
        if np.any(np.abs(np.sum(self.tangent_u * self.tangent_v, axis=1)) > tol):
            raise ParameterError("tangent vectors must be orthogonal")
        if np.any(self.scale_u <= 0) or np.any(self.scale_v <= 0):
            raise ParameterError("scales must be positive")
        if np.any(self.opacity < 0) or np.any(self.opacity > 1):
            raise ParameterError("opacity must lie in [0, 1]")
        if np.any(self.albedo < 0):
            raise ParameterError("albedo must be non-negative")


def rotation_to(direction) -> np.ndarray:
    """Rotation whose local +z axis is ``direction`` (camera-to-world convention).

    The local y axis is kept as close to world +y as possible (world +z when
    ``direction`` is nearly parallel to y).
    """
    z = _vec3(direction, "direction")
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 1 - 1e-9 else np.array([0.0, 0.0, 1.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)

