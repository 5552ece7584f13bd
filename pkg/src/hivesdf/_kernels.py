"""Compiled loops for the trilinear blend, the hottest primitive."""

from __future__ import annotations

import math

import numba
import numpy as np


@numba.njit(cache=True)
def trilinear_fwd(table, x, n, index_table, index_n, fallback):
    """Blend table rows at the 8 corners of the cell holding each point.

    ``index_table`` is empty for dense volumes (rows are linear node indices);
    otherwise corner nodes map onto the ``index_n`` lattice and through the
    index table, with -1 resolving to ``fallback``.
    """
    p_count = x.shape[0]
    c_count = table.shape[1]
    out = np.zeros((p_count, c_count))
    rows = np.empty((p_count, 8), dtype=np.int64)
    frac = np.empty((p_count, 3))
    dfrac = np.empty((p_count, 3))
    scale = 0.5 * (n - 1)
    sparse = index_table.size > 0
    m = index_n if sparse else n
    remap = sparse and index_n != n
    lo = np.empty(3, dtype=np.int64)
    hi = np.empty(3, dtype=np.int64)
    w = np.empty(8)
    for p in range(p_count):
        stride = 1
        for a in range(3):
            xa = x[p, a]
            dfrac[p, a] = scale if (xa >= -1.0 and xa <= 1.0) else 0.0
            u = (min(max(xa, -1.0), 1.0) + 1.0) * scale
            i = int(u)                  # u >= 0, so truncation is floor
            if i > n - 2:
                i = n - 2
            frac[p, a] = u - i
            i1 = i + 1
            if remap:
                # nearest coarse-lattice node; all terms are non-negative
                i = (2 * i * (index_n - 1) + (n - 1)) // (2 * (n - 1))
                i1 = (2 * i1 * (index_n - 1) + (n - 1)) // (2 * (n - 1))
            lo[a] = i * stride
            hi[a] = i1 * stride
            stride *= m
        fx, fy, fz = frac[p, 0], frac[p, 1], frac[p, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        w[0] = gx * gy * gz
        w[1] = fx * gy * gz
        w[2] = gx * fy * gz
        w[3] = fx * fy * gz
        w[4] = gx * gy * fz
        w[5] = fx * gy * fz
        w[6] = gx * fy * fz
        w[7] = fx * fy * fz
        for k in range(8):
            lin = (hi[0] if k & 1 else lo[0]) + (hi[1] if k & 2 else lo[1]) + (hi[2] if k & 4 else lo[2])
            if sparse:
                r = np.int64(index_table[lin])
                if r < 0:
                    r = fallback
            else:
                r = lin
            rows[p, k] = r
            wk = w[k]
            for c in range(c_count):
                out[p, c] += wk * table[r, c]
    return out, rows, frac, dfrac


@numba.njit(cache=True)
def trilinear_grad_x(g, table, rows, frac, dfrac):
    """Cotangent (P, 3) of the query positions."""
    p_count = g.shape[0]
    c_count = table.shape[1]
    g_x = np.zeros((p_count, 3))
    for p in range(p_count):
        fx, fy, fz = frac[p, 0], frac[p, 1], frac[p, 2]
        for k in range(8):
            bx, by, bz = k & 1, (k >> 1) & 1, (k >> 2) & 1
            wx = fx if bx else 1.0 - fx
            wy = fy if by else 1.0 - fy
            wz = fz if bz else 1.0 - fz
            sx = 1.0 if bx else -1.0
            sy = 1.0 if by else -1.0
            sz = 1.0 if bz else -1.0
            r = rows[p, k]
            proj = 0.0
            for c in range(c_count):
                proj += g[p, c] * table[r, c]
            g_x[p, 0] += proj * sx * wy * wz
            g_x[p, 1] += proj * wx * sy * wz
            g_x[p, 2] += proj * wx * wy * sz
        for a in range(3):
            g_x[p, a] *= dfrac[p, a]
    return g_x


@numba.njit(cache=True)
def trilinear_scatter(target, rows, frac, g, frozen):
    """target[rows[p, k]] += w_k(frac[p]) * g[p], skipping the ``frozen`` row."""
    c_count = g.shape[1]
    for p in range(g.shape[0]):
        fx, fy, fz = frac[p, 0], frac[p, 1], frac[p, 2]
        for k in range(8):
            r = rows[p, k]
            if r == frozen:
                continue
            w = (fx if k & 1 else 1.0 - fx) * (fy if k & 2 else 1.0 - fy) * (fz if k & 4 else 1.0 - fz)
            for c in range(c_count):
                target[r, c] += w * g[p, c]


@numba.njit(cache=True)
def take_rows(table, idx):
    out = np.empty((idx.size, table.shape[1]))
    for i in range(idx.size):
        r = idx[i]
        for c in range(table.shape[1]):
            out[i, c] = table[r, c]
    return out


@numba.njit(cache=True)
def scatter_add_rows(values, idx, n_rows):
    out = np.zeros((n_rows, values.shape[1]))
    for i in range(idx.size):
        r = idx[i]
        for c in range(values.shape[1]):
            out[r, c] += values[i, c]
    return out


@numba.njit(cache=True)
def scatter_into(target, idx, values):
    for i in range(idx.size):
        r = idx[i]
        for c in range(values.shape[1]):
            target[r, c] += values[i, c]


@numba.njit(cache=True, fastmath=True)
def adam_update(values, grad, m, v, lr, beta1, beta2, eps, c1, c2):
    """In-place Adam step with bias corrections ``c1``, ``c2``; zeroes ``grad``."""
    for i in range(values.size):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        values[i] -= lr * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)
        grad[i] = 0.0


EMPTY_INDEX = np.zeros(0, dtype=np.int32)
