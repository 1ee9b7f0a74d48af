"""Rotary encoding driven by event timestamps instead of sequence positions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

YEAR_MS = 365 * 86_400_000


@dataclass(frozen=True)
class RopeConfig:
    delta_t_max_ms: int
    phi_min: float
    base: float
    head_dim: int

    def __post_init__(self) -> None:
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if not self.phi_min > 0:
            raise ValueError(f"phi_min must be > 0, got {self.phi_min}")
        if not self.base > 1:
            raise ValueError(f"base must be > 1, got {self.base}")
        if self.delta_t_max_ms <= 0:
            raise ValueError(f"delta_t_max_ms must be > 0, got {self.delta_t_max_ms}")

    @classmethod
    def production(cls, head_dim: int = 88) -> "RopeConfig":
        """One-year lookback with phi_min=1e-4 and base=600000."""
        return cls(YEAR_MS, 1e-4, 600_000.0, head_dim)


def frequencies(config: RopeConfig) -> np.ndarray:
    """Angular rates in rad/ms, ``(phi_min / dt_max) * base**(2i/d)``."""
    i = np.arange(config.head_dim // 2, dtype=np.float64)
    return (config.phi_min / config.delta_t_max_ms) * config.base ** (2.0 * i / config.head_dim)


def angles(timestamps_ms, config: RopeConfig) -> np.ndarray:
    """(T, d/2) rotation angles, always in float64."""
    t = np.asarray(timestamps_ms, dtype=np.float64)
    return t[..., None] * frequencies(config)


def rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate consecutive pairs ``(x[2i], x[2i+1])``; ``cos``/``sin`` broadcast
    against ``x[..., ::2]``. The inverse rotation is ``rotate_pairs(x, cos, -sin)``."""
    out = np.empty_like(x)
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def rotate(vec, timestamp_ms: float, config: RopeConfig) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != config.head_dim:
        raise ValueError(f"vector dim {vec.shape[-1]} != head_dim {config.head_dim}")
    a = angles(timestamp_ms, config)
    return rotate_pairs(vec, np.cos(a), np.sin(a))


def rotated_dot(q, t_q: float, k, t_k: float, config: RopeConfig) -> float:
    """``rotate(q, t_q) . rotate(k, t_k)``, evaluated through the angle difference
    so large common timestamps do not cost precision."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.shape[-1] != config.head_dim:
        raise ValueError("q and k must both have head_dim components")
    a = (float(t_q) - float(t_k)) * frequencies(config)
    return float(np.dot(rotate_pairs(q, np.cos(a), np.sin(a)), k))


class TimeRotation:
    """Precomputed cos/sin tables for one token buffer.

    Timestamps are rebased to the newest token of each sequence before the
    angles are formed; relative angles are unchanged by the shift.
    """

    def __init__(self, timestamps_ms, config: RopeConfig, segments=None, dtype=np.float64):
        t = np.asarray(timestamps_ms, dtype=np.int64)
        if segments is None:
            rebased = t - (t.max() if t.size else 0)
        else:
            seg = np.asarray(segments)
            rebased = t.copy()
            for s in np.unique(seg):
                sel = seg == s
                rebased[sel] -= t[sel].max()
        a = angles(rebased.astype(np.float64), config)
        self.cos = np.cos(a).astype(dtype)
        self.sin = np.sin(a).astype(dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """x: (heads, T, d)."""
        return rotate_pairs(x, self.cos, self.sin)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return rotate_pairs(grad, self.cos, -self.sin)
