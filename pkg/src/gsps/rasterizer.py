"""Differentiable surfel splatting.

The fast path (:func:`rasterize`, compiled loops in :mod:`gsps._kernels`)
visits every pixel inside each surfel's projected 3-sigma box, intersects the
pixel ray with the surfel plane, drops hits below the weight cutoff, sorts the
survivors per pixel by
(depth, index) and alpha-composites albedo, normal and depth front to back.
Work is partitioned into screen tiles; a pixel's result never depends on the
partition, so buffers are identical for any tile size or thread count.

:func:`intersect_surfel`, :func:`project_ray_3d` and :func:`composite` are the
scalar per-pixel definitions the fast path is tested against.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .core import Camera, SplatScene, SurfelGaussian, gaussian_weight

W_MIN = math.exp(-4.5)  # 3-sigma fragment cutoff
T_STOP = 1e-4  # transmittance below which compositing stops
PARALLEL_EPS = 1e-9
BACKGROUND_DEPTH = math.inf


@dataclass
class SplatFragment:
    gaussian_index: int
    weight: float
    depth_at_pixel: float


@dataclass(eq=False)
class RenderBuffers:
    """Per-pixel render outputs.

    ``albedo`` and ``depth`` are normalized by ``alpha`` (background 0 and +inf
    where alpha is 0); ``normal`` is the raw blended camera-space normal.
    ``median_depth`` is the depth of the fragment at which transmittance first
    drops below one half (the expected depth where it never does). It is not
    differentiated; geometric lookups such as shadow mapping use it because it
    does not mix surfaces at silhouettes.
    """

    albedo: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    median_depth: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape

    def unit_normals(self, eps: float = 1e-6) -> np.ndarray:
        n = np.linalg.norm(self.normal, axis=-1, keepdims=True)
        return np.where(n > eps, self.normal / np.where(n > eps, n, 1.0), 0.0)


# ---------------------------------------------------------------------------
# scalar reference definitions

def _pixel_ray(camera: Camera, pixel):
    row, col = pixel
    o, d = camera.rays(np.array([row]), np.array([col]))
    return o[0], d[0]


def intersect_surfel(g: SurfelGaussian, camera: Camera, pixel, index: int = -1) -> SplatFragment | None:
    """Ray/surfel-plane hit for pixel ``(row, col)``; None when rejected."""
    o, d = _pixel_ray(camera, pixel)
    w = np.cross(g.tangent_u, g.tangent_v)
    denom = d @ w
    if abs(denom) < PARALLEL_EPS:
        return None
    t = ((g.center - o) @ w) / denom
    if t <= 0:
        return None
    r = o + t * d - g.center
    weight = float(gaussian_weight(r @ g.tangent_u / g.scale_u, r @ g.tangent_v / g.scale_v))
    if weight < W_MIN:
        return None
    return SplatFragment(index, weight, float(t))


def project_ray_3d(g: SurfelGaussian, camera: Camera, pixel, index: int = -1,
                   thickness: float = 1e-6) -> SplatFragment | None:
    """Evaluate the surfel as a thin 3D Gaussian at the ray point closest to its center."""
    o, d = _pixel_ray(camera, pixel)
    t = ((g.center - o) @ d) / (d @ d)
    if t <= 0:
        return None
    delta = o + t * d - g.center
    n = np.cross(g.tangent_u, g.tangent_v)
    n /= np.linalg.norm(n)
    m2 = (delta @ g.tangent_u / g.scale_u) ** 2 + (delta @ g.tangent_v / g.scale_v) ** 2 + (delta @ n / thickness) ** 2
    weight = math.exp(-0.5 * m2)
    if weight < W_MIN:
        return None
    return SplatFragment(index, weight, float(t))


def composite(fragments: list[SplatFragment], scene: SplatScene, channel: str, pixel=None):
    """Front-to-back blend of one channel over depth-sorted fragments.

    Returns ``(value, alpha)``; ``value`` is the raw (alpha-premultiplied) sum.
    Normals are camera-space and flipped to face the camera ray of ``pixel``
    (the optical axis when ``pixel`` is None).
    """
    if channel not in ("albedo", "normal", "depth"):
        raise ValueError(f"unknown channel {channel!r}")
    if __debug__:
        depths = [f.depth_at_pixel for f in fragments]
        if any(b < a for a, b in zip(depths, depths[1:])):
            raise ValueError("fragments must be sorted by ascending depth")
    cam = scene.camera
    d = cam.view_axis if pixel is None else _pixel_ray(cam, pixel)[1]
    value = np.zeros(1 if channel == "depth" else 3)
    T = 1.0
    for f in fragments:
        if T < T_STOP:
            break
        k = f.gaussian_index
        if channel == "albedo":
            c = scene.albedo[k]
        elif channel == "normal":
            n = np.cross(scene.tangent_u[k], scene.tangent_v[k])
            n /= np.linalg.norm(n)
            if n @ d > 0:
                n = -n
            c = cam.orientation.T @ n
        else:
            c = np.array([f.depth_at_pixel])
        a = scene.opacity[k] * f.weight
        value = value + c * a * T
        T *= 1.0 - a
    return (value[0] if channel == "depth" else value), 1.0 - T


# ---------------------------------------------------------------------------
# vectorized forward / backward

def _footprints(scene: SplatScene, camera: Camera):
    """Inclusive pixel box (r0, r1, c0, c1) of each surfel's projected 3-sigma footprint.

    Orthographic views use the exact box of the 3-sigma ellipse; pinhole views
    the box of the projected 3-sigma square.
    """
    K = len(scene)
    eu = 3.0 * scene.scale_u[:, None] * scene.tangent_u
    ev = 3.0 * scene.scale_v[:, None] * scene.tangent_v
    full = np.zeros(K, bool)
    if camera.model == "orthographic":
        col, row, _ = camera.project(scene.centers)
        lu, lv = eu @ camera.orientation, ev @ camera.orientation
        half = np.sqrt(lu[:, :2] ** 2 + lv[:, :2] ** 2) / camera.pixel_pitch
        col = np.stack([col - half[:, 0], col + half[:, 0]], axis=1)
        row = np.stack([row - half[:, 1], row + half[:, 1]], axis=1)
    else:
        corners = np.stack([scene.centers + su * eu + sv * ev for su in (-1, 1) for sv in (-1, 1)], axis=1)
        col, row, t = camera.project(corners)
        full = np.any(~(t > 1e-9), axis=1)
        col = np.where(full[:, None], 0.0, col)
        row = np.where(full[:, None], 0.0, row)
    eps = 1e-6
    c0 = np.ceil(col.min(axis=1) - eps)
    c1 = np.floor(col.max(axis=1) + eps)
    r0 = np.ceil(row.min(axis=1) - eps)
    r1 = np.floor(row.max(axis=1) + eps)
    W, H = camera.width, camera.height
    c0 = np.where(full, 0, np.clip(c0, 0, W)).astype(np.int64)
    r0 = np.where(full, 0, np.clip(r0, 0, H)).astype(np.int64)
    c1 = np.where(full, W - 1, np.clip(c1, -1, W - 1)).astype(np.int64)
    r1 = np.where(full, H - 1, np.clip(r1, -1, H - 1)).astype(np.int64)
    return r0, r1, c0, c1


class Raster:
    """Forward pass state; :meth:`backward` maps buffer adjoints to surfel adjoints.

    Fragments are stored in sorted order (tile, pixel, depth, index).
    """

    def __init__(self, scene: SplatScene, camera: Camera | None = None, tile_size: int = 16,
                 threads: int = 1, mode: str = "surfel", thickness: float = 1e-6):
        if mode not in ("surfel", "ray3d"):
            raise ValueError(f"unknown mode {mode!r}")
        self.scene = scene
        self.camera = camera = scene.camera if camera is None else camera
        self.mode = mode
        self.tile_size = int(tile_size)
        self.threads = max(1, int(threads))
        H, W = camera.height, camera.width
        self.shape = (H, W)

        self.wvec = np.cross(scene.tangent_u, scene.tangent_v)
        self.wnorm = np.linalg.norm(self.wvec, axis=1)
        self.O, self.D = (np.ascontiguousarray(x) for x in camera.rays())
        gid, pix, t, u, v, G, denom = _k.pair_fragments(
            *_footprints(scene, camera), self.O, self.D, *_contig(scene.centers, scene.tangent_u, scene.tangent_v,
                                                                  scene.scale_u, scene.scale_v, self.wvec,
                                                                  self.wnorm),
            W_MIN, PARALLEL_EPS, mode == "ray3d", float(thickness))

        # pixel slots in tile-major order
        ts = self.tile_size
        rows, cols = np.divmod(np.arange(H * W), W)
        tile_of = (rows // ts) * -(-W // ts) + cols // ts
        slot = np.empty(H * W, np.int64)
        slot[np.lexsort((np.arange(H * W), tile_of))] = np.arange(H * W)
        order = _k.sort_fragments(pix, t, gid, slot, H * W)
        self.gid, self.pix = gid[order], pix[order]
        self.t, self.u, self.v, self.G = t[order], u[order], v[order], G[order]
        self.denom = denom[order]
        self.tile = tile_of[self.pix]
        self.sign = np.where(self.denom > 0, -1.0, 1.0)
        # camera-facing unit normal, camera frame
        nw = self.wvec[self.gid] / self.wnorm[self.gid][:, None]
        self.n_cam = (nw * self.sign[:, None]) @ camera.orientation

        # pixel segments
        F = len(self.gid)
        if F:
            starts = np.concatenate([[0], np.nonzero(np.diff(self.pix))[0] + 1])
        else:
            starts = np.zeros(0, np.int64)
        self.seg_start = starts
        self.seg_len = np.diff(np.concatenate([starts, [F]])).astype(np.int64)
        self.seg_pix = self.pix[starts] if F else np.zeros(0, np.int64)
        self.seg_tile = self.tile[starts] if F else np.zeros(0, np.int64)
        self._forward()

    @property
    def seg_of(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.seg_start)), self.seg_len)

    @property
    def rank(self) -> np.ndarray:
        return np.arange(len(self.gid)) - np.repeat(self.seg_start, self.seg_len)

    # chunks of whole tiles; results are identical for any chunking
    def _chunks(self):
        S = len(self.seg_start)
        if S == 0:
            return []
        if self.threads == 1:
            return [(0, S)]
        bounds = np.concatenate([[0], np.nonzero(np.diff(self.seg_tile))[0] + 1, [S]])
        n = min(self.threads, len(bounds) - 1)
        cut = np.linspace(0, len(bounds) - 1, n + 1).round().astype(int)
        return [(int(bounds[cut[i]]), int(bounds[cut[i + 1]])) for i in range(n)]

    def _map(self, fn):
        chunks = self._chunks()
        if len(chunks) <= 1:
            return [fn(*c) for c in chunks]
        with ThreadPoolExecutor(max_workers=self.threads) as ex:
            return list(ex.map(lambda c: fn(*c), chunks))

    def _forward(self):
        sc = self.scene
        H, W = self.shape
        self.a = sc.opacity[self.gid] * self.G
        self.feat = np.concatenate([sc.albedo[self.gid], self.n_cam, self.t[:, None]], axis=1)
        F = len(self.gid)
        S = len(self.seg_start)
        self.T_before = np.zeros(F)
        self.included = np.zeros(F, bool)
        acc = np.zeros((S, 7))
        T_final = np.ones(S)
        med = np.full(S, np.nan)
        self._map(lambda s0, s1: _k.composite_forward(self.seg_start, self.seg_len, s0, s1, self.a, self.feat,
                                                      T_STOP, acc, T_final, self.T_before, self.included, med))
        self.seg_acc = acc
        self.seg_alpha = 1.0 - T_final
        cpre = np.zeros((H * W, 3))
        normal = np.zeros((H * W, 3))
        dnum = np.zeros(H * W)
        alpha = np.zeros(H * W)
        median = np.full(H * W, np.nan)
        cpre[self.seg_pix] = acc[:, 0:3]
        normal[self.seg_pix] = acc[:, 3:6]
        dnum[self.seg_pix] = acc[:, 6]
        alpha[self.seg_pix] = self.seg_alpha
        median[self.seg_pix] = med
        self.median = median.reshape(H, W)
        self.cpre = cpre.reshape(H, W, 3)
        self.normal = normal.reshape(H, W, 3)
        self.dnum = dnum.reshape(H, W)
        self.alpha = alpha.reshape(H, W)

    @property
    def buffers(self) -> RenderBuffers:
        A = self.alpha
        pos = A > 0
        safe = np.where(pos, A, 1.0)
        albedo = np.where(pos[..., None], self.cpre / safe[..., None], 0.0)
        depth = np.where(pos, self.dnum / safe, BACKGROUND_DEPTH)
        median = np.where(np.isnan(self.median), depth, self.median)
        return RenderBuffers(albedo, self.normal.copy(), depth, A.copy(), median)

    def fragments_at(self, row: int, col: int) -> list[SplatFragment]:
        p = row * self.shape[1] + col
        idx = np.nonzero(self.pix == p)[0]
        return [SplatFragment(int(self.gid[i]), float(self.G[i]), float(self.t[i])) for i in idx]

    def backward(self, g_cpre: np.ndarray, g_normal: np.ndarray, g_dnum: np.ndarray, g_alpha: np.ndarray) -> dict:
        """Adjoints of (premultiplied albedo, blended normal, depth numerator, alpha) -> surfel params.

        Inputs are (H, W, 3), (H, W, 3), (H, W), (H, W). Returns per-Gaussian
        arrays keyed like :data:`gsps.core.PARAM_FIELDS`.
        """
        if self.mode != "surfel":
            raise NotImplementedError("gradients are only implemented for the surfel evaluation mode")
        sc = self.scene
        K = len(sc)
        pix = self.seg_pix
        g8 = np.zeros((len(pix), 8))
        g8[:, 0:3] = g_cpre.reshape(-1, 3)[pix]
        g8[:, 3:6] = g_normal.reshape(-1, 3)[pix]
        g8[:, 6] = g_dnum.reshape(-1)[pix]
        g8[:, 7] = g_alpha.reshape(-1)[pix]
        vals = np.empty((len(self.gid), 15))
        params = _contig(sc.centers, sc.tangent_u, sc.tangent_v, sc.scale_u, sc.scale_v, sc.opacity, self.wvec,
                         self.wnorm)
        R = np.ascontiguousarray(self.camera.orientation)
        self._map(lambda s0, s1: _k.fragment_gradients(
            self.seg_start, self.seg_len, s0, s1, g8, self.gid, self.a, self.G, self.u, self.v, self.t,
            self.T_before, self.included, self.feat, self.O, self.D, self.pix, self.denom, self.sign, *params, R,
            vals))
        # sum in pixel order so the result does not depend on the tiling
        sums = _k.accumulate(np.argsort(self.seg_pix, kind="stable"), self.seg_start, self.seg_len, self.gid,
                             vals, K)
        return {
            "centers": sums[:, 0:3],
            "tangent_u": sums[:, 3:6],
            "tangent_v": sums[:, 6:9],
            "scale_u": sums[:, 9],
            "scale_v": sums[:, 10],
            "opacity": sums[:, 11],
            "albedo": sums[:, 12:15],
        }


def _contig(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


def rasterize(scene: SplatScene, camera: Camera | None = None, **kw) -> Raster:
    return Raster(scene, camera, **kw)


def render(scene: SplatScene, camera: Camera | None = None, tile_size: int = 16, threads: int = 1,
           mode: str = "surfel") -> RenderBuffers:
    """Render albedo, normal, depth and alpha buffers of ``scene``."""
    return Raster(scene, camera, tile_size=tile_size, threads=threads, mode=mode).buffers
