"""Compiled per-fragment loops behind :class:`gsps.rasterizer.Raster`.

Every kernel walks its inputs in a fixed order, so results do not depend on
how the caller splits work across threads.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True, error_model="numpy")


@njit(**_JIT)
def pair_fragments(r0, r1, c0, c1, O, D, centers, tu, tv, su, sv, wvec, wnorm, w_min, parallel_eps, ray3d,
                   thickness):
    """Intersect every pixel ray in each surfel's box; keep hits above ``w_min``.

    Returns (gid, pix, t, u, v, G, denom) in (surfel, row, col) order.
    """
    H, W = O.shape[0], O.shape[1]
    K = r0.shape[0]
    total = 0
    for k in range(K):
        if r1[k] >= r0[k] and c1[k] >= c0[k]:
            total += (r1[k] - r0[k] + 1) * (c1[k] - c0[k] + 1)
    gid = np.empty(total, np.int64)
    pix = np.empty(total, np.int64)
    tt = np.empty(total)
    uu = np.empty(total)
    vv = np.empty(total)
    GG = np.empty(total)
    dd = np.empty(total)
    n = 0
    for k in range(K):
        px, py, pz = centers[k, 0], centers[k, 1], centers[k, 2]
        wx, wy, wz = wvec[k, 0], wvec[k, 1], wvec[k, 2]
        for row in range(r0[k], r1[k] + 1):
            for col in range(c0[k], c1[k] + 1):
                ox, oy, oz = O[row, col, 0], O[row, col, 1], O[row, col, 2]
                dx, dy, dz = D[row, col, 0], D[row, col, 1], D[row, col, 2]
                denom = dx * wx + dy * wy + dz * wz
                if ray3d:
                    t = ((px - ox) * dx + (py - oy) * dy + (pz - oz) * dz) / (dx * dx + dy * dy + dz * dz)
                else:
                    if abs(denom) < parallel_eps:
                        continue
                    t = ((px - ox) * wx + (py - oy) * wy + (pz - oz) * wz) / denom
                if not t > 0:
                    continue
                rx, ry, rz = ox + t * dx - px, oy + t * dy - py, oz + t * dz - pz
                u = (rx * tu[k, 0] + ry * tu[k, 1] + rz * tu[k, 2]) / su[k]
                v = (rx * tv[k, 0] + ry * tv[k, 1] + rz * tv[k, 2]) / sv[k]
                m2 = u * u + v * v
                if ray3d:
                    wc = (rx * wx + ry * wy + rz * wz) / (wnorm[k] * thickness)
                    m2 += wc * wc
                G = math.exp(-0.5 * m2)
                if not G >= w_min:
                    continue
                gid[n] = k
                pix[n] = row * W + col
                tt[n] = t
                uu[n] = u
                vv[n] = v
                GG[n] = G
                dd[n] = denom
                n += 1
    return gid[:n], pix[:n], tt[:n], uu[:n], vv[:n], GG[:n], dd[:n]


@njit(**_JIT)
def sort_fragments(pix, t, gid, slot, npix):
    """Order fragments by (slot[pix], t, gid) given input already in gid order.

    A counting sort on the pixel slot keeps the gid order inside each pixel;
    an insertion sort on depth (stable) then finishes every pixel's short list.
    """
    F = pix.shape[0]
    count = np.zeros(npix + 1, np.int64)
    for i in range(F):
        count[slot[pix[i]] + 1] += 1
    for s in range(npix):
        count[s + 1] += count[s]
    start = count.copy()
    order = np.empty(F, np.int64)
    key = np.empty(F)
    for i in range(F):
        s = slot[pix[i]]
        order[start[s]] = i
        key[start[s]] = t[i]
        start[s] += 1
    for s in range(npix):
        lo, hi = count[s], count[s + 1]
        for i in range(lo + 1, hi):
            cur = order[i]
            tc = key[i]
            j = i - 1
            while j >= lo and key[j] > tc:
                order[j + 1] = order[j]
                key[j + 1] = key[j]
                j -= 1
            order[j + 1] = cur
            key[j + 1] = tc
    return order


@njit(**_JIT)
def composite_forward(seg_start, seg_len, s0, s1, a, feat, t_stop, acc, T_final, T_before, included, median):
    """Front-to-back blending of segments [s0, s1); writes into the output arrays."""
    C = feat.shape[1]
    for s in range(s0, s1):
        T = 1.0
        med = np.nan
        f0 = seg_start[s]
        for f in range(f0, f0 + seg_len[s]):
            T_before[f] = T
            if T < t_stop:
                included[f] = False
                continue
            included[f] = True
            w = a[f] * T
            for c in range(C):
                acc[s, c] += w * feat[f, c]
            T = T * (1.0 - a[f])
            if math.isnan(med) and T < 0.5:
                med = feat[f, C - 1]
        T_final[s] = T
        median[s] = med


@njit(**_JIT)
def fragment_gradients(seg_start, seg_len, s0, s1, g8, gid, a, G, u, v, t, T_before, included, feat, O, D, pix,
                       denom, sign, centers, tu, tv, su, sv, opacity, wvec, wnorm, R, out):
    """Per-fragment adjoints of segments [s0, s1) written as rows of ``out``.

    Columns: center (3), tangent_u (3), tangent_v (3), scale_u, scale_v,
    opacity, albedo (3).
    """
    H, W = O.shape[0], O.shape[1]
    for s in range(s0, s1):
        f0 = seg_start[s]
        f1 = f0 + seg_len[s]
        rest = 0.0
        for f in range(f1 - 1, f0 - 1, -1):
            if not included[f]:
                for c in range(15):
                    out[f, c] = 0.0
                continue
            sf = 0.0
            for c in range(7):
                sf += feat[f, c] * g8[s, c]
            sf += g8[s, 7]
            da = T_before[f] * (sf - rest)
            rest = sf * a[f] + (1.0 - a[f]) * rest

            k = gid[f]
            wts = a[f] * T_before[f]
            d_t = wts * g8[s, 6]
            d_op = da * G[f]
            dG = da * opacity[k]
            du = -dG * u[f] * G[f]
            dv = -dG * v[f] * G[f]
            row = pix[f] // W
            col = pix[f] - row * W
            ox, oy, oz = O[row, col, 0], O[row, col, 1], O[row, col, 2]
            dx, dy, dz = D[row, col, 0], D[row, col, 1], D[row, col, 2]
            tf = t[f]
            px, py, pz = centers[k, 0], centers[k, 1], centers[k, 2]
            rx, ry, rz = ox + tf * dx - px, oy + tf * dy - py, oz + tf * dz - pz
            au = du / su[k]
            av = dv / sv[k]
            ux, uy, uz = tu[k, 0], tu[k, 1], tu[k, 2]
            vx, vy, vz = tv[k, 0], tv[k, 1], tv[k, 2]
            drx, dry, drz = au * ux + av * vx, au * uy + av * vy, au * uz + av * vz
            d_tux, d_tuy, d_tuz = au * rx, au * ry, au * rz
            d_tvx, d_tvy, d_tvz = av * rx, av * ry, av * rz
            d_su = -du * u[f] / su[k]
            d_sv = -dv * v[f] / sv[k]
            d_t += drx * dx + dry * dy + drz * dz
            dn = denom[f]
            dnum = d_t / dn
            ddenom = -d_t * tf / dn
            wx, wy, wz = wvec[k, 0], wvec[k, 1], wvec[k, 2]
            dpx, dpy, dpz = -drx + dnum * wx, -dry + dnum * wy, -drz + dnum * wz
            dwx = dnum * (px - ox) + ddenom * dx
            dwy = dnum * (py - oy) + ddenom * dy
            dwz = dnum * (pz - oz) + ddenom * dz
            # blended normal is sign * R^T w / |w| in the camera frame
            gx, gy, gz = wts * g8[s, 3], wts * g8[s, 4], wts * g8[s, 5]
            sg = sign[f]
            nwx = (R[0, 0] * gx + R[0, 1] * gy + R[0, 2] * gz) * sg
            nwy = (R[1, 0] * gx + R[1, 1] * gy + R[1, 2] * gz) * sg
            nwz = (R[2, 0] * gx + R[2, 1] * gy + R[2, 2] * gz) * sg
            wn = wnorm[k]
            hx, hy, hz = wx / wn, wy / wn, wz / wn
            proj = hx * nwx + hy * nwy + hz * nwz
            dwx += (nwx - hx * proj) / wn
            dwy += (nwy - hy * proj) / wn
            dwz += (nwz - hz * proj) / wn
            # w = tu x tv
            d_tux += vy * dwz - vz * dwy
            d_tuy += vz * dwx - vx * dwz
            d_tuz += vx * dwy - vy * dwx
            d_tvx += dwy * uz - dwz * uy
            d_tvy += dwz * ux - dwx * uz
            d_tvz += dwx * uy - dwy * ux
            out[f, 0], out[f, 1], out[f, 2] = dpx, dpy, dpz
            out[f, 3], out[f, 4], out[f, 5] = d_tux, d_tuy, d_tuz
            out[f, 6], out[f, 7], out[f, 8] = d_tvx, d_tvy, d_tvz
            out[f, 9], out[f, 10], out[f, 11] = d_su, d_sv, d_op
            out[f, 12], out[f, 13], out[f, 14] = wts * g8[s, 0], wts * g8[s, 1], wts * g8[s, 2]


@njit(**_JIT)
def accumulate(seg_order, seg_start, seg_len, gid, vals, K):
    """Sum fragment rows per surfel, visiting segments in ``seg_order``."""
    C = vals.shape[1]
    out = np.zeros((K, C))
    for s in seg_order:
        f0 = seg_start[s]
        for f in range(f0, f0 + seg_len[s]):
            k = gid[f]
            for c in range(C):
                out[k, c] += vals[f, c]
    return out
