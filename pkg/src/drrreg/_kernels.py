"""Numba ray kernels.

All kernels are parallel over detector rows and keep every pixel's
arithmetic sequential, so results do not depend on the thread count.
Grid conventions: voxel ``i`` spans ``origin + [i, i + 1) * spacing`` and its
value sits at the voxel centre.
"""

from __future__ import annotations

import math

import os

import numpy as np
from numba import config, njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ and "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    # prefer OpenMP over an outdated system TBB
    config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_INF = np.inf


@njit(cache=True, inline="always")
def _ray_box(s, d, origin, spacing, shape):
    """Clip the segment ``s + a d, a in [0, 1]`` to the volume box.

    Returns ``(a0, a1, ax0, b0, ax1, b1)`` where ``ax0``/``ax1`` is the
    axis whose face bounds the entry/exit (-1 when the segment end itself
    bounds it) and ``b0``/``b1`` the face coordinate. ``a1 <= a0`` is a miss.
    """
    a0 = 0.0
    a1 = 1.0
    ax0 = -1
    ax1 = -1
    b0 = 0.0
    b1 = 0.0
    for k in range(3):
        lo = origin[k]
        hi = origin[k] + shape[k] * spacing[k]
        if hi < lo:
            lo, hi = hi, lo
        if d[k] == 0.0:
            if s[k] < lo or s[k] > hi:
                return 1.0, 0.0, -1, 0.0, -1, 0.0
            continue
        t_lo = (lo - s[k]) / d[k]
        t_hi = (hi - s[k]) / d[k]
        if t_lo <= t_hi:
            tn, bn, tf, bf = t_lo, lo, t_hi, hi
        else:
            tn, bn, tf, bf = t_hi, hi, t_lo, lo
        if tn > a0:
            a0 = tn
            ax0 = k
            b0 = bn
        if tf < a1:
            a1 = tf
            ax1 = k
            b1 = bf
    return a0, a1, ax0, b0, ax1, b1


@njit(cache=True)
def _siddon_ray(vol, origin, spacing, s, d):
    nx, ny, nz = vol.shape
    shape = (nx, ny, nz)
    a0, a1, _, _, _, _ = _ray_box(s, d, origin, spacing, shape)
    if a1 <= a0:
        return 0.0
    # next plane crossing per axis
    nxt = np.empty(3)
    idx = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    for k in range(3):
        if d[k] == 0.0:
            nxt[k] = _INF
            idx[k] = 0
            step[k] = 0
            continue
        c0 = (s[k] + a0 * d[k] - origin[k]) / spacing[k]
        if d[k] / spacing[k] > 0:
            step[k] = 1
            idx[k] = int(math.floor(c0)) + 1
        else:
            step[k] = -1
            idx[k] = int(math.ceil(c0)) - 1
        if idx[k] < 0 or idx[k] > shape[k]:
            nxt[k] = _INF
        else:
            nxt[k] = (origin[k] + idx[k] * spacing[k] - s[k]) / d[k]
    total = 0.0
    a = a0
    while a < a1:
        an = min(nxt[0], nxt[1], nxt[2], a1)
        if an > a:
            am = 0.5 * (a + an)
            i = int(math.floor((s[0] + am * d[0] - origin[0]) / spacing[0]))
            j = int(math.floor((s[1] + am * d[1] - origin[1]) / spacing[1]))
            k = int(math.floor((s[2] + am * d[2] - origin[2]) / spacing[2]))
            i = min(max(i, 0), nx - 1)
            j = min(max(j, 0), ny - 1)
            k = min(max(k, 0), nz - 1)
            total += vol[i, j, k] * (an - a)
        for q in range(3):
            if nxt[q] <= an:
                idx[q] += step[q]
                if idx[q] < 0 or idx[q] > shape[q]:
                    nxt[q] = _INF
                else:
                    nxt[q] = (origin[q] + idx[q] * spacing[q] - s[q]) / d[q]
        a = an
    return total


@njit(cache=True, parallel=True)
def siddon(vol, origin, spacing, source, targets):
    H, W, _ = targets.shape
    out = np.zeros((H, W))
    for r in prange(H):
        d = np.empty(3)
        for c in range(W):
            for k in range(3):
                d[k] = targets[r, c, k] - source[k]
            L = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
            out[r, c] = L * _siddon_ray(vol, origin, spacing, source, d)
    return out


@njit(cache=True, inline="always")
def _cell(g, n):
    """Clamp continuous index ``g`` into ``[0, n-1]``; returns (i0, frac, inside)."""
    if n == 1:
        return 0, 0.0, False
    if g <= 0.0:
        return 0, 0.0, False
    if g >= n - 1:
        return n - 2, 1.0, False
    i0 = int(math.floor(g))
    if i0 > n - 2:
        i0 = n - 2
    return i0, g - i0, True


@njit(cache=True, inline="always")
def _trilinear(vol, gx, gy, gz):
    nx, ny, nz = vol.shape
    i, fx, _ = _cell(gx, nx)
    j, fy, _ = _cell(gy, ny)
    k, fz, _ = _cell(gz, nz)
    i1 = min(i + 1, nx - 1)
    j1 = min(j + 1, ny - 1)
    k1 = min(k + 1, nz - 1)
    c00 = vol[i, j, k] * (1 - fx) + vol[i1, j, k] * fx
    c10 = vol[i, j1, k] * (1 - fx) + vol[i1, j1, k] * fx
    c01 = vol[i, j, k1] * (1 - fx) + vol[i1, j, k1] * fx
    c11 = vol[i, j1, k1] * (1 - fx) + vol[i1, j1, k1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@njit(cache=True, parallel=True)
def trilinear(vol, origin, spacing, source, targets, n_samples):
    H, W, _ = targets.shape
    nx, ny, nz = vol.shape
    shape = (nx, ny, nz)
    out = np.zeros((H, W))
    M = n_samples
    for r in prange(H):
        d = np.empty(3)
        for c in range(W):
            for k in range(3):
                d[k] = targets[r, c, k] - source[k]
            a0, a1, _, _, _, _ = _ray_box(source, d, origin, spacing, shape)
            if a1 <= a0:
                continue
            L = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
            h = (a1 - a0) / (M - 1)
            acc = 0.0
            for m in range(M):
                a = a0 + (a1 - a0) * (m / (M - 1))
                gx = (source[0] + a * d[0] - origin[0]) / spacing[0] - 0.5
                gy = (source[1] + a * d[1] - origin[1]) / spacing[1] - 0.5
                gz = (source[2] + a * d[2] - origin[2]) / spacing[2] - 0.5
                v = _trilinear(vol, gx, gy, gz)
                if m == 0 or m == M - 1:
                    v *= 0.5
                acc += v
            out[r, c] = L * h * acc
    return out


@njit(cache=True, parallel=True)
def trilinear_grad(vol, origin, spacing, source, targets, n_samples):
    """Trilinear render plus exact derivatives w.r.t. source and target.

    Returns ``(img, d_source, d_target)`` with the last two of shape
    ``(H, W, 3)``.
    """
    H, W, _ = targets.shape
    nx, ny, nz = vol.shape
    shape = (nx, ny, nz)
    out = np.zeros((H, W))
    gs = np.zeros((H, W, 3))
    gp = np.zeros((H, W, 3))
    M = n_samples
    for r in prange(H):
        d = np.empty(3)
        G0 = np.empty(3)
        G1 = np.empty(3)
        for c in range(W):
            for k in range(3):
                d[k] = targets[r, c, k] - source[k]
            a0, a1, ax0, b0, ax1, b1 = _ray_box(source, d, origin, spacing, shape)
            if a1 <= a0:
                continue
            L = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
            h = (a1 - a0) / (M - 1)
            S = 0.0
            Ga = 0.0
            Gb = 0.0
            for k in range(3):
                G0[k] = 0.0
                G1[k] = 0.0
            for m in range(M):
                u = m / (M - 1)
                a = a0 + (a1 - a0) * u
                w = 0.5 if (m == 0 or m == M - 1) else 1.0
                gx = (source[0] + a * d[0] - origin[0]) / spacing[0] - 0.5
                gy = (source[1] + a * d[1] - origin[1]) / spacing[1] - 0.5
                gz = (source[2] + a * d[2] - origin[2]) / spacing[2] - 0.5
                i, fx, inx = _cell(gx, nx)
                j, fy, iny = _cell(gy, ny)
                kk, fz, inz = _cell(gz, nz)
                i1 = min(i + 1, nx - 1)
                j1 = min(j + 1, ny - 1)
                k1 = min(kk + 1, nz - 1)
                v000 = vol[i, j, kk]
                v100 = vol[i1, j, kk]
                v010 = vol[i, j1, kk]
                v110 = vol[i1, j1, kk]
                v001 = vol[i, j, k1]
                v101 = vol[i1, j, k1]
                v011 = vol[i, j1, k1]
                v111 = vol[i1, j1, k1]
                c00 = v000 * (1 - fx) + v100 * fx
                c10 = v010 * (1 - fx) + v110 * fx
                c01 = v001 * (1 - fx) + v101 * fx
                c11 = v011 * (1 - fx) + v111 * fx
                c0 = c00 * (1 - fy) + c10 * fy
                c1 = c01 * (1 - fy) + c11 * fy
                val = c0 * (1 - fz) + c1 * fz
                # gradient in world units; clamped axes are locally constant
                dvx = 0.0
                dvy = 0.0
                dvz = 0.0
                if inx:
                    e00 = v100 - v000
                    e10 = v110 - v010
                    e01 = v101 - v001
                    e11 = v111 - v011
                    dvx = ((e00 * (1 - fy) + e10 * fy) * (1 - fz) + (e01 * (1 - fy) + e11 * fy) * fz) / spacing[0]
                if iny:
                    dvy = ((c10 - c00) * (1 - fz) + (c11 - c01) * fz) / spacing[1]
                if inz:
                    dvz = (c1 - c0) / spacing[2]
                S += w * val
                G0[0] += w * dvx
                G0[1] += w * dvy
                G0[2] += w * dvz
                G1[0] += w * a * dvx
                G1[1] += w * a * dvy
                G1[2] += w * a * dvz
                dd = dvx * d[0] + dvy * d[1] + dvz * d[2]
                Ga += w * (1 - u) * dd
                Gb += w * u * dd
            out[r, c] = L * h * S
            dIda0 = -L * S / (M - 1) + L * h * Ga
            dIda1 = L * S / (M - 1) + L * h * Gb
            for k in range(3):
                dhat = d[k] / L
                gs[r, c, k] = -dhat * h * S + L * h * (G0[k] - G1[k])
                gp[r, c, k] = dhat * h * S + L * h * G1[k]
            # the clipped interval moves with the ray endpoints
            if ax0 >= 0:
                gs[r, c, ax0] += dIda0 * (a0 - 1.0) / d[ax0]
                gp[r, c, ax0] += dIda0 * (-a0) / d[ax0]
            if ax1 >= 0:
                gs[r, c, ax1] += dIda1 * (a1 - 1.0) / d[ax1]
                gp[r, c, ax1] += dIda1 * (-a1) / d[ax1]
    return out, gs, gp
