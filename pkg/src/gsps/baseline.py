"""Least-squares Lambertian photometric stereo (Woodham) and a trimmed variant."""
from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .ingest import ImageStack

LUMA = np.array([0.2126, 0.7152, 0.0722])  # Rec. 709, linear RGB
COND_MAX = 1e8
DEGENERATE = 1e-9


def luminance(images: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N, H, W)."""
    return images[..., 0] if images.shape[-1] == 1 else images @ LUMA


def _check_lights(L: np.ndarray) -> None:
    if len(L) < 3 or np.linalg.matrix_rank(L, tol=1e-9) < 3:
        raise ParameterError("light directions must span three dimensions (rank-deficient light matrix)")


def _finish(m: np.ndarray, mask: np.ndarray):
    rho = np.linalg.norm(m, axis=-1)
    ok = rho >= DEGENERATE
    n = np.where(ok[:, None], m / np.where(ok, rho, 1.0)[:, None], 0.0)
    n[n[:, 2] < 0] *= -1.0
    H, W = mask.shape
    normals = np.zeros((H, W, 3))
    albedo = np.zeros((H, W))
    normals[mask] = n
    albedo[mask] = np.where(ok, rho, 0.0)
    return normals, albedo


def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched 3x3 solves ``A x = b``; ill-conditioned systems use a pseudo-inverse."""
    cond = np.linalg.cond(A)
    poor = ~(cond <= COND_MAX)
    x = np.zeros(b.shape)
    if np.any(~poor):
        x[~poor] = np.linalg.solve(A[~poor], b[~poor][..., None])[..., 0]
    if np.any(poor):
        x[poor] = (np.linalg.pinv(A[poor], rcond=1e-12) @ b[poor][..., None])[..., 0]
    return x


def woodham(stack: ImageStack):
    """Per-pixel least squares ``L m = I``; returns (normals (H, W, 3), albedo (H, W)).

    Degenerate pixels (``|m|`` below 1e-9) get a zero normal and zero albedo.
    """
    L = stack.light_matrix()
    _check_lights(L)
    I = luminance(stack.images)[:, stack.mask]  # (N, P)
    A = L.T @ L
    if np.linalg.cond(A) <= COND_MAX:
        m = np.linalg.solve(A, L.T @ I).T
    else:
        m = (np.linalg.pinv(L, rcond=1e-12) @ I).T
    return _finish(m, stack.mask)


def woodham_robust(stack: ImageStack, discard_fraction: float):
    """Woodham after discarding the darkest and the brightest ``discard_fraction`` of observations per pixel."""
    if not 0.0 <= discard_fraction < 0.5:
        raise ParameterError("discard_fraction must lie in [0, 0.5)")
    L = stack.light_matrix()
    n_obs = len(L)
    k = int(np.floor(discard_fraction * n_obs))
    if n_obs - 2 * k < 3:
        raise ParameterError(f"trimming {discard_fraction} of {n_obs} observations leaves fewer than 3")
    if k == 0:
        return woodham(stack)
    _check_lights(L)
    I = luminance(stack.images)[:, stack.mask].T  # (P, N)
    order = np.argsort(I, axis=1, kind="stable")
    keep = order[:, k:n_obs - k]
    Lk = L[keep]  # (P, n', 3)
    Ik = np.take_along_axis(I, keep, axis=1)
    A = np.einsum("pni,pnj->pij", Lk, Lk)
    b = np.einsum("pni,pn->pi", Lk, Ik)
    return _finish(_solve(A, b), stack.mask)
