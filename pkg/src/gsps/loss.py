"""Training objective: L1 photometric term plus depth/normal consistency."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import Camera
from .errors import ParameterError
from .ingest import ImageStack
from .rasterizer import Raster
from .shading import unit_normals

DEFAULT_LAMBDA = 0.05
ALPHA_MIN = 0.5


class EmptyDomainWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LossReport:
    photometric: float
    normal_reg: float
    total: float
    lam: float

    @classmethod
    def build(cls, photometric: float, normal_reg: float, lam: float) -> "LossReport":
        return cls(float(photometric), float(normal_reg), float(photometric + lam * normal_reg), float(lam))

    def to_dict(self) -> dict:
        return {"L_c": self.photometric, "L_n": self.normal_reg, "total": self.total, "lambda": self.lam}


def photometric_loss(predicted, observed: ImageStack) -> float:
    """Mean absolute difference over foreground pixels, channels and lights."""
    pred = np.asarray(predicted, dtype=np.float64)
    if pred.ndim == 3:
        pred = pred[..., None]
    obs = observed.images
    if pred.shape[:3] != obs.shape[:3]:
        raise ParameterError(f"predicted images {pred.shape[:3]} do not match observations {obs.shape[:3]}")
    pred, obs = np.broadcast_arrays(pred, obs)
    diff = np.abs(pred - obs)[:, observed.mask]
    return float(diff.mean()) if diff.size else 0.0


class DepthNormals:
    """Normals from a depth buffer by finite differences of back-projected points.

    Each valid pixel uses central differences when both neighbors along an
    axis are valid, one-sided differences when only one is. An axis with no
    valid neighbor contributes zero slope and flags the pixel; an isolated
    pixel therefore gets (0, 0, 1). Normals are camera-space and face the
    camera.
    """

    def __init__(self, depth: np.ndarray, camera: Camera, mask: np.ndarray):
        mask = np.asarray(mask, bool)
        depth = np.where(mask, depth, 0.0)
        if not np.all(np.isfinite(depth)):
            raise ParameterError("depth must be finite on the mask")
        self.mask = mask
        self.o, self.dirs = camera.local_rays()
        self.P = self.o + depth[..., None] * self.dirs
        # stencil coefficients for neighbors at offsets -1, 0, +1 along each axis
        self.cx, self.okx = self._stencil(mask, axis=1)
        self.cy, self.oky = self._stencil(mask, axis=0)
        self.dPx = self._apply(self.P, self.cx, 1, np.array([1.0, 0.0, 0.0]), self.okx)
        self.dPy = self._apply(self.P, self.cy, 0, np.array([0.0, -1.0, 0.0]), self.oky)
        m = np.cross(self.dPy, self.dPx)
        mn = np.linalg.norm(m, axis=-1)
        good = mask & (mn > 0)
        nprime = np.where(good[..., None], m / np.where(good, mn, 1.0)[..., None], 0.0)
        self.sign = np.where(np.sum(nprime * self.dirs, axis=-1) > 0, -1.0, 1.0)
        n = nprime * self.sign[..., None]
        n[mask & ~good] = (0.0, 0.0, 1.0)
        self.m, self.mn, self.nprime, self.good = m, mn, nprime, good
        self.normals = np.where(mask[..., None], n, 0.0)
        self.flagged = mask & (~self.okx | ~self.oky | ~good)

    @staticmethod
    def _stencil(mask, axis):
        def shifted(k):
            out = np.zeros_like(mask)
            src = [slice(None)] * 2
            dst = [slice(None)] * 2
            if k > 0:
                src[axis], dst[axis] = slice(k, None), slice(None, -k)
            else:
                src[axis], dst[axis] = slice(None, k), slice(-k, None)
            out[tuple(dst)] = mask[tuple(src)]
            return out

        nxt, prv = shifted(1), shifted(-1)
        both = mask & nxt & prv
        fwd = mask & nxt & ~prv
        bwd = mask & prv & ~nxt
        c = np.zeros(mask.shape + (3,))
        c[both] = (-0.5, 0.0, 0.5)
        c[fwd] = (0.0, -1.0, 1.0)
        c[bwd] = (-1.0, 1.0, 0.0)
        return c, both | fwd | bwd

    @staticmethod
    def _shift(a, k, axis):
        """out[i] = a[i + k] along ``axis`` (zero outside)."""
        out = np.zeros_like(a)
        src = [slice(None)] * a.ndim
        dst = [slice(None)] * a.ndim
        if k > 0:
            src[axis], dst[axis] = slice(k, None), slice(None, -k)
        elif k < 0:
            src[axis], dst[axis] = slice(None, k), slice(-k, None)
        out[tuple(dst)] = a[tuple(src)]
        return out

    def _apply(self, P, c, axis, fallback, ok):
        d = sum(c[..., k + 1, None] * self._shift(P, k, axis) for k in (-1, 0, 1))
        return np.where(ok[..., None], d, fallback)

    def vjp(self, g_normals: np.ndarray) -> np.ndarray:
        """Adjoint of :attr:`normals` with respect to the input depth buffer."""
        g = np.where(self.good[..., None], g_normals, 0.0) * self.sign[..., None]
        gm = (g - self.nprime * np.sum(self.nprime * g, axis=-1, keepdims=True)) \
            / np.where(self.good, self.mn, 1.0)[..., None]
        g_dPy = np.where(self.oky[..., None], np.cross(self.dPx, gm), 0.0)
        g_dPx = np.where(self.okx[..., None], np.cross(gm, self.dPy), 0.0)
        gP = np.zeros_like(self.P)
        for axis, c, gd in ((1, self.cx, g_dPx), (0, self.cy, g_dPy)):
            for k in (-1, 0, 1):
                # dP at pixel i reads P[i + k]; send its adjoint back to i + k
                gP += self._shift(c[..., k + 1, None] * gd, -k, axis)
        return np.sum(gP * self.dirs, axis=-1)


def depth_to_normals(depth: np.ndarray, camera: Camera, mask: np.ndarray, return_flags: bool = False):
    dn = DepthNormals(depth, camera, mask)
    return (dn.normals, dn.flagged) if return_flags else dn.normals


def normal_consistency_loss(splatted: np.ndarray, from_depth: np.ndarray, alpha: np.ndarray,
                            mask: np.ndarray, alpha_min: float = ALPHA_MIN) -> float:
    """Mean of ``1 - n_splat . n_depth`` over mask pixels with alpha above ``alpha_min``."""
    if not (splatted.shape == from_depth.shape and splatted.shape[:2] == alpha.shape == mask.shape):
        raise ParameterError("normal maps, alpha and mask must share one resolution")
    dom = np.asarray(mask, bool) & (alpha > alpha_min)
    if not dom.any():
        warnings.warn("normal consistency domain is empty", EmptyDomainWarning, stacklevel=2)
        return 0.0
    nh, _ = unit_normals(splatted)
    return float(np.mean(1.0 - np.sum(nh * from_depth, axis=-1)[dom]))


def objective(raster: Raster, stack: ImageStack, lam: float = DEFAULT_LAMBDA, grad: bool = False,
              depth_grad: bool = True, alpha_min: float = ALPHA_MIN):
    """Evaluate the loss on a finished forward pass.

    With ``grad`` returns ``(report, (g_cpre, g_normal, g_dnum, g_alpha))``,
    the adjoints :meth:`Raster.backward` consumes. ``depth_grad=False`` stops
    the consistency term from reaching the depth buffer.
    """
    if lam < 0:
        raise ParameterError("lambda must be non-negative")
    if raster.shape != stack.mask.shape:
        raise ParameterError("render resolution does not match the image stack")
    mask = stack.mask
    cpre, N, A = raster.cpre, raster.normal, raster.alpha
    nh, nnorm = unit_normals(N)
    L = stack.light_matrix()
    E = np.array([l.intensity for l in stack.lights])
    cos = nh @ L.T
    s = np.maximum(0.0, cos)
    pred = cpre[:, :, None, :] * E[None, None] * s[..., None]
    obs = np.moveaxis(stack.rgb(), 0, 2)
    diff = pred - obs
    count = int(mask.sum()) * len(L) * 3
    Lc = float(np.abs(diff[mask]).sum() / count) if count else 0.0

    dom = mask & (A > alpha_min)
    nd_ = int(dom.sum())
    D = np.where(dom, raster.dnum / np.where(dom, A, 1.0), 0.0)
    dn = DepthNormals(D, raster.camera, dom)
    if nd_:
        Ln = float(np.sum((1.0 - np.sum(nh * dn.normals, axis=-1))[dom]) / nd_)
    else:
        warnings.warn("normal consistency domain is empty", EmptyDomainWarning, stacklevel=2)
        Ln = 0.0
    report = LossReport.build(Lc, Ln, lam)
    if not grad:
        return report

    g_diff = np.where(mask[..., None, None], np.sign(diff), 0.0) / max(count, 1)
    g_cpre = np.sum(g_diff * E[None, None] * s[..., None], axis=2)
    g_s = np.sum(g_diff * cpre[:, :, None, :] * E[None, None], axis=-1)
    g_cos = np.where(cos > 0, g_s, 0.0)
    g_nh = g_cos @ L
    g_dnum = np.zeros_like(A)
    g_alpha = np.zeros_like(A)
    if nd_ and lam > 0:
        g_nh = g_nh - np.where(dom[..., None], dn.normals, 0.0) * (lam / nd_)
        if depth_grad:
            g_nd = -np.where(dom[..., None], nh, 0.0) * (lam / nd_)
            gD = np.where(dom, dn.vjp(g_nd), 0.0)
            safeA = np.where(dom, A, 1.0)
            g_dnum = gD / safeA
            g_alpha = -gD * D / safeA
    ok = nnorm > 1e-6
    g_N = np.where(ok[..., None],
                   (g_nh - nh * np.sum(nh * g_nh, axis=-1, keepdims=True)) / np.where(ok, nnorm, 1.0)[..., None],
                   0.0)
    return report, (g_cpre, g_N, g_dnum, g_alpha)


def total_loss(scene, stack: ImageStack, lam: float = DEFAULT_LAMBDA, **render_kw) -> LossReport:
    """Render once, shade under every light and assemble the composite loss."""
    return objective(Raster(scene, **render_kw), stack, lam)
