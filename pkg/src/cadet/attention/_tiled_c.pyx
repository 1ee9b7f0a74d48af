# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tiled masked attention with online softmax.

Same contract as ``_tiled_py``: masks arrive as per-row intervals, tiles
with no allowed cell are skipped before any score is computed.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, log, INFINITY
from libc.stdint cimport int64_t

cnp.import_array()


cdef inline bint _allowed(const int64_t[::1] lo, const int64_t[::1] hi, const int64_t[::1] extra,
                          Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    return (lo[i] <= j and j < hi[i]) or j == i or j == extra[i]


cdef bint _tile_masked(const int64_t[::1] lo, const int64_t[::1] hi, const int64_t[::1] extra,
                       Py_ssize_t r0, Py_ssize_t r1, Py_ssize_t c0, Py_ssize_t c1) noexcept nogil:
    cdef Py_ssize_t i
    if (r0 if r0 > c0 else c0) < (r1 if r1 < c1 else c1):
        return False
    for i in range(r0, r1):
        if (lo[i] if lo[i] > c0 else c0) < (hi[i] if hi[i] < c1 else c1):
            return False
        if extra[i] >= c0 and extra[i] < c1:
            return False
    return True


def tile_map(const int64_t[::1] lo, const int64_t[::1] hi, const int64_t[::1] extra, Py_ssize_t tile):
    """int8 (n_tiles, n_tiles) grid, 1 where the tile is fully masked."""
    cdef Py_ssize_t T = lo.shape[0]
    cdef Py_ssize_t n = (T + tile - 1) // tile
    grid_arr = np.zeros((n, n), dtype=np.int8)
    cdef signed char[:, ::1] grid = grid_arr
    cdef Py_ssize_t rt, ct, r0, r1, c0, c1
    with nogil:
        for rt in range(n):
            r0 = rt * tile
            r1 = r0 + tile if r0 + tile < T else T
            for ct in range(n):
                c0 = ct * tile
                c1 = c0 + tile if c0 + tile < T else T
                if _tile_masked(lo, hi, extra, r0, r1, c0, c1):
                    grid[rt, ct] = 1
    return grid_arr


def tiled_forward(floating[:, :, ::1] q, floating[:, :, ::1] k, floating[:, :, ::1] v,
                  const int64_t[::1] lo, const int64_t[::1] hi, const int64_t[::1] extra,
                  Py_ssize_t tile, double scale):
    """Returns (out, lse, tiles_visited, tiles_skipped); q, k, v are (H, T, dk)."""
    cdef Py_ssize_t H = q.shape[0], T = q.shape[1], D = q.shape[2]
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((H, T, D), dtype=dtype)
    lse_arr = np.zeros((H, T), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef floating[:, ::1] lse = lse_arr
    cdef double[::1] m = np.empty(T, dtype=np.float64)
    cdef double[::1] l = np.empty(T, dtype=np.float64)
    cdef double[:, ::1] acc = np.empty((T, D), dtype=np.float64)
    cdef double[::1] s = np.empty(tile, dtype=np.float64)
    cdef Py_ssize_t h, rt, ct, r0, r1, c0, c1, i, j, d, n
    cdef double dot, bmax, m_new, corr, p, lsum
    cdef bint any_allowed

    grid_arr = tile_map(lo, hi, extra, tile)
    cdef signed char[:, ::1] grid = grid_arr
    n = grid_arr.shape[0]
    skipped = int(grid_arr.sum())
    with nogil:
        for h in range(H):
            for i in range(T):
                m[i] = -INFINITY
                l[i] = 0.0
                for d in range(D):
                    acc[i, d] = 0.0
            for rt in range(n):
                r0 = rt * tile
                r1 = r0 + tile if r0 + tile < T else T
                for ct in range(n):
                    if grid[rt, ct]:
                        continue
                    c0 = ct * tile
                    c1 = c0 + tile if c0 + tile < T else T
                    for i in range(r0, r1):
                        bmax = -INFINITY
                        any_allowed = False
                        for j in range(c0, c1):
                            if _allowed(lo, hi, extra, i, j):
                                dot = 0.0
                                for d in range(D):
                                    dot = dot + q[h, i, d] * k[h, j, d]
                                dot = dot * scale
                                s[j - c0] = dot
                                if dot > bmax:
                                    bmax = dot
                                any_allowed = True
                            else:
                                s[j - c0] = -INFINITY
                        if not any_allowed:
                            continue
                        m_new = bmax if bmax > m[i] else m[i]
                        corr = exp(m[i] - m_new) if m[i] != -INFINITY else 0.0
                        lsum = l[i] * corr
                        for d in range(D):
                            acc[i, d] = acc[i, d] * corr
                        for j in range(c0, c1):
                            if s[j - c0] == -INFINITY:
                                continue
                            p = exp(s[j - c0] - m_new)
                            lsum = lsum + p
                            for d in range(D):
                                acc[i, d] = acc[i, d] + p * v[h, j, d]
                        l[i] = lsum
                        m[i] = m_new
            for i in range(T):
                for d in range(D):
                    out[h, i, d] = <floating>(acc[i, d] / l[i])
                lse[h, i] = <floating>(m[i] + log(l[i]))
    return out_arr, lse_arr, n * n - skipped, skipped


def tiled_backward(floating[:, :, ::1] q, floating[:, :, ::1] k, floating[:, :, ::1] v,
                   floating[:, :, ::1] out, floating[:, ::1] lse, floating[:, :, ::1] dout,
                   const int64_t[::1] lo, const int64_t[::1] hi, const int64_t[::1] extra,
                   Py_ssize_t tile, double scale):
    """Recomputes probabilities from ``lse`` per visited tile; returns (dq, dk, dv)."""
    cdef Py_ssize_t H = q.shape[0], T = q.shape[1], D = q.shape[2]
    dtype = np.float64 if floating is double else np.float32
    dq_arr = np.zeros((H, T, D), dtype=np.float64)
    dk_arr = np.zeros((H, T, D), dtype=np.float64)
    dv_arr = np.zeros((H, T, D), dtype=np.float64)
    cdef double[:, :, ::1] dq = dq_arr
    cdef double[:, :, ::1] dk = dk_arr
    cdef double[:, :, ::1] dv = dv_arr
    cdef double[::1] delta = np.empty(T, dtype=np.float64)
    cdef Py_ssize_t h, rt, ct, r0, r1, c0, c1, i, j, d, n
    cdef double s, p, dp, ds

    grid_arr = tile_map(lo, hi, extra, tile)
    cdef signed char[:, ::1] grid = grid_arr
    n = grid_arr.shape[0]
    with nogil:
        for h in range(H):
            for i in range(T):
                s = 0.0
                for d in range(D):
                    s = s + dout[h, i, d] * out[h, i, d]
                delta[i] = s
            for rt in range(n):
                r0 = rt * tile
                r1 = r0 + tile if r0 + tile < T else T
                for ct in range(n):
                    if grid[rt, ct]:
                        continue
                    c0 = ct * tile
                    c1 = c0 + tile if c0 + tile < T else T
                    for i in range(r0, r1):
                        for j in range(c0, c1):
                            if not _allowed(lo, hi, extra, i, j):
                                continue
                            s = 0.0
                            for d in range(D):
                                s = s + q[h, i, d] * k[h, j, d]
                            p = exp(s * scale - lse[h, i])
                            dp = 0.0
                            for d in range(D):
                                dv[h, j, d] = dv[h, j, d] + p * dout[h, i, d]
                                dp = dp + dout[h, i, d] * v[h, j, d]
                            ds = p * (dp - delta[i]) * scale
                            for d in range(D):
                                dq[h, i, d] = dq[h, i, d] + ds * k[h, j, d]
                                dk[h, j, d] = dk[h, j, d] + ds * q[h, i, d]
    return dq_arr.astype(dtype, copy=False), dk_arr.astype(dtype, copy=False), dv_arr.astype(dtype, copy=False)
