"""Self-gated multi-head attention with a reference and a tiled engine."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .. import masking
from ..masking import MaskSpec, RowIntervals
from ..numerics import (
    DegenerateRowError,
    Parameter,
    sigmoid,
    softmax_rows,
    softmax_rows_backward,
)
from ..rope import TimeRotation
from . import kernels

ENGINES = ("reference", "tiled")
GATINGS = ("both", "representation", "none")
WEIGHT_NAMES = ("W_Q", "W_K", "W_V", "W_X_gate", "W_Q_gate", "W_K_gate", "W_O")


@dataclass(frozen=True)
class TileConfig:
    tile_size: int = 64
    engine: str = "tiled"
    backend: str | None = None  # "compiled" / "python"; None = import-time default

    def __post_init__(self) -> None:
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}")


def init_attention_params(prefix: str, d_model: int, rng: np.random.Generator, dtype=np.float64) -> dict[str, Parameter]:
    std = 1.0 / math.sqrt(d_model)
    return {
        f"{prefix}.{name}": Parameter(f"{prefix}.{name}", (rng.standard_normal((d_model, d_model)) * std).astype(dtype))
        for name in WEIGHT_NAMES
    }


# ---------------------------------------------------------------------------
# gates
# ---------------------------------------------------------------------------


def self_gate(x: np.ndarray, w_gate: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``x * sigmoid(x @ w_gate)``; returns (gated, gate)."""
    g = sigmoid(x @ w_gate)
    return x * g, g


def self_gate_backward(x, g, w_gate: Parameter, grad_out) -> np.ndarray:
    dpre = grad_out * x * g * (1.0 - g)
    w_gate.grad += x.reshape(-1, x.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
    return grad_out * g + dpre @ w_gate.value.T


def representation_gate(x: np.ndarray, w_x_gate: np.ndarray) -> np.ndarray:
    return self_gate(x, w_x_gate)[0]


def interaction_gate(q, k, w_q_gate, w_k_gate) -> tuple[np.ndarray, np.ndarray]:
    return self_gate(q, w_q_gate)[0], self_gate(k, w_k_gate)[0]


# ---------------------------------------------------------------------------
# attention cores on (H, T, dk) arrays
# ---------------------------------------------------------------------------


class TiledResult(NamedTuple):
    output: np.ndarray
    lse: np.ndarray
    tiles_visited: int
    tiles_skipped: int


def reference_attend(q, k, v, spec: MaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Dense masked softmax attention. Returns (output, probabilities)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 2, 1)) * scale + masking.materialize(spec).astype(q.dtype)
    p = softmax_rows(scores)
    return p @ v, p


def tiled_attend(q, k, v, spec: MaskSpec | RowIntervals, tile_config: TileConfig = TileConfig()) -> TiledResult:
    """Online-softmax attention over key tiles; fully masked tiles are never scored."""
    rows = spec if isinstance(spec, RowIntervals) else masking.compile_rows(spec)
    fwd, _ = kernels.get_backend(tile_config.backend)
    scale = 1.0 / math.sqrt(q.shape[-1])
    out, lse, visited, skipped = fwd(
        np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v),
        rows.lo, rows.hi, rows.extra, tile_config.tile_size, scale,
    )
    return TiledResult(out, lse, int(visited), int(skipped))


def tiled_attend_backward(q, k, v, result: TiledResult, dout, rows: RowIntervals, tile_config: TileConfig):
    _, bwd = kernels.get_backend(tile_config.backend)
    scale = 1.0 / math.sqrt(q.shape[-1])
    return bwd(
        np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v),
        np.ascontiguousarray(result.output), np.ascontiguousarray(result.lse), np.ascontiguousarray(dout),
        rows.lo, rows.hi, rows.extra, tile_config.tile_size, scale,
    )


# ---------------------------------------------------------------------------
# full layer
# ---------------------------------------------------------------------------


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    T, d = x.shape
    return np.ascontiguousarray(x.reshape(T, n_heads, d // n_heads).transpose(1, 0, 2))


def merge_heads(x: np.ndarray) -> np.ndarray:
    H, T, dk = x.shape
    return x.transpose(1, 0, 2).reshape(T, H * dk)


def mha_forward(
    x: np.ndarray,
    params: dict[str, Parameter],
    prefix: str,
    n_heads: int,
    spec: MaskSpec,
    rotation: TimeRotation | None,
    tile_config: TileConfig = TileConfig(),
    gating: str = "both",
    rows: RowIntervals | None = None,
):
    """Gate -> project -> gate Q/K -> heads -> time rotation -> masked attention -> W_O.

    Returns ``(output, cache)``; the cache feeds :func:`mha_backward`.
    """
    if gating not in GATINGS:
        raise ValueError(f"gating must be one of {GATINGS}")
    P = {name: params[f"{prefix}.{name}"] for name in WEIGHT_NAMES}
    cache: dict = {"x": x, "gating": gating, "prefix": prefix}
    if gating == "none":
        xt = x
    else:
        xt, cache["gx"] = self_gate(x, P["W_X_gate"].value)
    q = xt @ P["W_Q"].value
    k = xt @ P["W_K"].value
    v = xt @ P["W_V"].value
    cache.update(xt=xt, q=q, k=k)
    if gating == "both":
        qt, cache["gq"] = self_gate(q, P["W_Q_gate"].value)
        kt, cache["gk"] = self_gate(k, P["W_K_gate"].value)
    else:
        qt, kt = q, k
    qh, kh, vh = split_heads(qt, n_heads), split_heads(kt, n_heads), split_heads(v, n_heads)
    if rotation is not None:
        qh, kh = rotation.forward(qh), rotation.forward(kh)
    cache.update(qh=qh, kh=kh, vh=vh, rotation=rotation, spec=spec, tile_config=tile_config)
    if tile_config.engine == "reference":
        try:
            oh, p = reference_attend(qh, kh, vh, spec)
        except DegenerateRowError as exc:  # pragma: no cover - diagonal is always allowed
            raise AssertionError("query row with no visible key") from exc
        cache["p"] = p
    else:
        rows = rows if rows is not None else masking.compile_rows(spec)
        res = tiled_attend(qh, kh, vh, rows, tile_config)
        oh = res.output
        cache.update(tiled=res, rows=rows)
    o = merge_heads(oh)
    cache["o"] = o
    return o @ P["W_O"].value, cache


def mha_backward(cache: dict, grad_out: np.ndarray, params: dict[str, Parameter]) -> np.ndarray:
    """Accumulates all seven weight gradients; returns d(loss)/dx."""
    prefix = cache["prefix"]
    P = {name: params[f"{prefix}.{name}"] for name in WEIGHT_NAMES}
    gating = cache["gating"]
    P["W_O"].grad += cache["o"].T @ grad_out
    do = split_heads(grad_out @ P["W_O"].value.T, cache["qh"].shape[0])
    qh, kh, vh = cache["qh"], cache["kh"], cache["vh"]
    if cache["tile_config"].engine == "reference":
        p = cache["p"]
        scale = 1.0 / math.sqrt(qh.shape[-1])
        dvh = p.transpose(0, 2, 1) @ do
        ds = softmax_rows_backward(p, do @ vh.transpose(0, 2, 1)) * scale
        dqh = ds @ kh
        dkh = ds.transpose(0, 2, 1) @ qh
    else:
        dqh, dkh, dvh = tiled_attend_backward(qh, kh, vh, cache["tiled"], do, cache["rows"], cache["tile_config"])
    rotation = cache["rotation"]
    if rotation is not None:
        dqh, dkh = rotation.backward(dqh), rotation.backward(dkh)
    dqt, dkt, dv = merge_heads(dqh), merge_heads(dkh), merge_heads(dvh)
    q, k, xt, x = cache["q"], cache["k"], cache["xt"], cache["x"]
    if gating == "both":
        dq = self_gate_backward(q, cache["gq"], P["W_Q_gate"], dqt)
        dk = self_gate_backward(k, cache["gk"], P["W_K_gate"], dkt)
    else:
        dq, dk = dqt, dkt
    P["W_Q"].grad += xt.T @ dq
    P["W_K"].grad += xt.T @ dk
    P["W_V"].grad += xt.T @ dv
    dxt = dq @ P["W_Q"].value.T + dk @ P["W_K"].value.T + dv @ P["W_V"].value.T
    if gating == "none":
        return dxt
    return self_gate_backward(x, cache["gx"], P["W_X_gate"], dxt)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------


class OpCount(NamedTuple):
    dense_pairs: int
    sparse_pairs: int
    ratio: float


def op_count(spec: MaskSpec) -> OpCount:
    n = len(spec)
    dense = n * n
    sparse = masking.count_allowed(spec)
    return OpCount(dense, sparse, dense / sparse if sparse else math.inf)


def tile_stats(spec: MaskSpec | RowIntervals, tile: int) -> tuple[int, int]:
    """(tiles_visited, tiles_skipped) without running any attention."""
    rows = spec if isinstance(spec, RowIntervals) else masking.compile_rows(spec)
    n = len(rows.lo)
    skipped = total = 0
    for r0, r1, c0, c1 in masking.enumerate_tiles(n, n, tile):
        total += 1
        skipped += rows.tile_masked(r0, r1, c0, c1)
    return total - skipped, skipped
