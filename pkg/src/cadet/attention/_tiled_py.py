"""Tiled masked attention in numpy: loops over tiles in Python, vectorised
inside a tile. Selected when the compiled core is unavailable."""

from __future__ import annotations

import numpy as np


def _tile_masked(lo, hi, extra, r0, r1, c0, c1) -> bool:
    if max(r0, c0) < min(r1, c1):
        return False
    if np.any(np.maximum(lo[r0:r1], c0) < np.minimum(hi[r0:r1], c1)):
        return False
    ex = extra[r0:r1]
    return not np.any((ex >= c0) & (ex < c1))


def _tile_allowed(lo, hi, extra, r0, r1, c0, c1) -> np.ndarray:
    r = np.arange(r0, r1)[:, None]
    c = np.arange(c0, c1)[None, :]
    return ((lo[r0:r1, None] <= c) & (c < hi[r0:r1, None])) | (c == r) | (c == extra[r0:r1, None])


def tiled_forward(q, k, v, lo, hi, extra, tile: int, scale: float):
    """q, k, v: (H, T, dk). Returns (out, lse, tiles_visited, tiles_skipped)."""
    H, T, dk = q.shape
    out = np.zeros_like(q)
    lse = np.zeros((H, T), dtype=q.dtype)
    visited = skipped = 0
    for r0 in range(0, T, tile):
        r1 = min(r0 + tile, T)
        m = np.full((H, r1 - r0), -np.inf, dtype=q.dtype)
        l = np.zeros((H, r1 - r0), dtype=q.dtype)
        acc = np.zeros((H, r1 - r0, dk), dtype=q.dtype)
        for c0 in range(0, T, tile):
            c1 = min(c0 + tile, T)
            if _tile_masked(lo, hi, extra, r0, r1, c0, c1):
                skipped += 1
                continue
            visited += 1
            ok = _tile_allowed(lo, hi, extra, r0, r1, c0, c1)
            s = (q[:, r0:r1] @ k[:, c0:c1].transpose(0, 2, 1)) * scale
            s = np.where(ok, s, -np.inf)
            blk_max = s.max(axis=-1)
            m_new = np.maximum(m, blk_max)
            live = np.isfinite(m_new)
            safe = np.where(live, m_new, 0.0)
            corr = np.where(np.isfinite(m), np.exp(m - safe), 0.0)
            p = np.exp(s - safe[..., None])
            l = l * corr + p.sum(axis=-1)
            acc = acc * corr[..., None] + p @ v[:, c0:c1]
            m = m_new
        out[:, r0:r1] = acc / l[..., None]
        lse[:, r0:r1] = m + np.log(l)
    return out, lse, visited, skipped


def tiled_backward(q, k, v, out, lse, dout, lo, hi, extra, tile: int, scale: float):
    H, T, dk = q.shape
    dq = np.zeros_like(q)
    dk_ = np.zeros_like(k)
    dv = np.zeros_like(v)
    delta = (dout * out).sum(axis=-1)
    for r0 in range(0, T, tile):
        r1 = min(r0 + tile, T)
        for c0 in range(0, T, tile):
            c1 = min(c0 + tile, T)
            if _tile_masked(lo, hi, extra, r0, r1, c0, c1):
                continue
            ok = _tile_allowed(lo, hi, extra, r0, r1, c0, c1)
            s = (q[:, r0:r1] @ k[:, c0:c1].transpose(0, 2, 1)) * scale
            p = np.where(ok, np.exp(s - lse[:, r0:r1, None]), 0.0)
            dv[:, c0:c1] += p.transpose(0, 2, 1) @ dout[:, r0:r1]
            dp = dout[:, r0:r1] @ v[:, c0:c1].transpose(0, 2, 1)
            ds = p * (dp - delta[:, r0:r1, None]) * scale
            dq[:, r0:r1] += ds @ k[:, c0:c1]
            dk_[:, c0:c1] += ds.transpose(0, 2, 1) @ q[:, r0:r1]
    return dq, dk_, dv
