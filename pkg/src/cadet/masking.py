"""Attention-mask predicates for session-aware training and single-pass
multi-candidate scoring.

A :class:`MaskSpec` describes a token buffer (possibly several packed
sequences). Two consumers read it:

* the scalar predicates :func:`train_allowed` / :func:`inference_allowed`
  and the dense :func:`materialize`, used by the reference engine and tests;
* :func:`compile_rows`, which reduces every query row to a key interval
  ``[lo, hi)`` plus the diagonal and at most one extra key. The tiled engine
  uses only this O(T) form.

Index convention is 0-based throughout: with context length ``L`` the
context occupies ``0..L-1`` and candidates ``L..L+N-1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .events import OrderingError, TokenKind

DEFAULT_DELAY_MS = 3_600_000


class Mode(str, Enum):
    TRAINING = "training"
    INFERENCE = "inference"


@dataclass
class MaskSpec:
    mode: Mode
    timestamps: np.ndarray  # int64 per token
    kinds: np.ndarray  # TokenKind per token
    segments: np.ndarray  # sequence id per token, -1 for padding
    candidates: np.ndarray  # bool: causally isolated query tokens
    delta_delay_ms: int = DEFAULT_DELAY_MS
    candidate_delay_ms: int | None = None
    strict_pairing: bool = False
    eval_rows: np.ndarray | None = None  # bool: in-sequence rows that use candidate_delay_ms

    def __post_init__(self) -> None:
        n = len(self.timestamps)
        if self.eval_rows is None:
            self.eval_rows = np.zeros(n, bool)
        for name in ("kinds", "segments", "candidates", "eval_rows"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"MaskSpec.{name} has {len(getattr(self, name))} entries, expected {n}")
        if self.delta_delay_ms < 0 or (self.candidate_delay_ms or 0) < 0:
            raise ValueError("delays must be non-negative")
        self.pair = _pair_links(self.kinds, self.segments)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def row_delay(self) -> np.ndarray:
        cand_delay = self.delta_delay_ms if self.candidate_delay_ms is None else self.candidate_delay_ms
        return np.where(self.candidates | self.eval_rows, cand_delay, self.delta_delay_ms).astype(np.int64)

    # -- constructors -------------------------------------------------------

    @classmethod
    def training(
        cls,
        timestamps: Sequence[int],
        delta_delay_ms: int = DEFAULT_DELAY_MS,
        kinds: Sequence[int] | None = None,
        offsets: Sequence[int] | None = None,
        candidates: Sequence[bool] | None = None,
        candidate_delay_ms: int | None = None,
        strict_pairing: bool = False,
    ) -> "MaskSpec":
        ts = np.asarray(timestamps, dtype=np.int64)
        n = len(ts)
        return cls(
            Mode.TRAINING,
            ts,
            _kinds(kinds, n),
            _segments(offsets, n),
            np.zeros(n, bool) if candidates is None else np.asarray(candidates, bool),
            delta_delay_ms,
            candidate_delay_ms,
            strict_pairing,
        )

    @classmethod
    def inference(
        cls,
        context_length: int,
        candidate_count: int,
        timestamps: Sequence[int] | None = None,
        kinds: Sequence[int] | None = None,
    ) -> "MaskSpec":
        if context_length < 0 or candidate_count < 0:
            raise ValueError("context_length and candidate_count must be >= 0")
        n = context_length + candidate_count
        ts = np.zeros(n, np.int64) if timestamps is None else np.asarray(timestamps, np.int64)
        cand = np.zeros(n, bool)
        cand[context_length:] = True
        return cls(Mode.INFERENCE, ts, _kinds(kinds, n), np.zeros(n, np.int64), cand, 0)

    @property
    def context_length(self) -> int:
        return int(np.count_nonzero(~self.candidates & (self.segments >= 0)))

    @property
    def candidate_count(self) -> int:
        return int(np.count_nonzero(self.candidates))


def _kinds(kinds, n):
    return np.full(n, int(TokenKind.IMPRESSION), np.int8) if kinds is None else np.asarray(kinds, np.int8)


def _segments(offsets, n):
    if offsets is None:
        return np.zeros(n, np.int64)
    offsets = list(offsets)
    seg = np.full(n, -1, np.int64)
    for s, (a, b) in enumerate(zip(offsets, offsets[1:])):
        seg[a:b] = s
    return seg


def _pair_links(kinds: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Index of each action token's own impression (the preceding token), else -1."""
    pair = np.full(len(kinds), -1, np.int64)
    if len(kinds) > 1:
        idx = np.nonzero(
            (kinds[1:] == TokenKind.ACTION) & (kinds[:-1] == TokenKind.IMPRESSION) & (segments[1:] == segments[:-1])
        )[0]
        pair[idx + 1] = idx
    return pair


# ---------------------------------------------------------------------------
# scalar predicates
# ---------------------------------------------------------------------------


def _common(i: int, j: int, spec: MaskSpec) -> bool | None:
    """Rules shared by both modes; ``None`` means 'decided by the mode'."""
    if spec.segments[i] < 0 or spec.segments[i] != spec.segments[j]:
        return i == j and spec.segments[i] < 0  # a pad token sees only itself
    if i == j:
        return True
    if j > i or spec.candidates[j]:
        return False
    return None


def train_allowed(i: int, j: int, spec: MaskSpec) -> bool:
    """Session-aware rule: key ``j`` must be older than ``t_i - delay``.

    Exceptions: the diagonal, the static profile prefix, and (unless
    ``strict_pairing``) an action token reading its own impression.
    """
    common = _common(i, j, spec)
    if common is not None:
        return common
    if spec.kinds[j] == TokenKind.STATIC:
        return True
    if spec.kinds[i] == TokenKind.STATIC:
        return False
    if not spec.strict_pairing and spec.pair[i] == j:
        return True
    return bool(spec.timestamps[j] <= spec.timestamps[i] - spec.row_delay[i])


def inference_allowed(i: int, j: int, spec: MaskSpec) -> bool:
    """Context rows are causal; candidate rows see the context and themselves."""
    common = _common(i, j, spec)
    return True if common is None else common


def allowed(i: int, j: int, spec: MaskSpec) -> bool:
    return train_allowed(i, j, spec) if spec.mode is Mode.TRAINING else inference_allowed(i, j, spec)


def materialize(spec: MaskSpec, total_tokens: int | None = None) -> np.ndarray:
    """Dense additive mask: 0 where allowed, ``-inf`` elsewhere."""
    n = len(spec)
    if total_tokens is not None and total_tokens != n:
        raise ValueError(f"spec covers {n} tokens, asked for {total_tokens}")
    return np.where(allowed_matrix(spec), 0.0, -np.inf)


def allowed_matrix(spec: MaskSpec) -> np.ndarray:
    """Boolean (T, T) matrix; vectorised transcription of the predicates."""
    n = len(spec)
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    seg_i = spec.segments[:, None]
    same = (seg_i >= 0) & (seg_i == spec.segments[None, :])
    diag = i == j
    base = same & (j < i) & ~spec.candidates[None, :]
    if spec.mode is Mode.TRAINING:
        kind_i = spec.kinds[:, None]
        kind_j = spec.kinds[None, :]
        static_key = kind_j == TokenKind.STATIC
        pair = (spec.pair[:, None] == j) & (not spec.strict_pairing)
        timed = spec.timestamps[None, :] <= spec.timestamps[:, None] - spec.row_delay[:, None]
        rule = static_key | ((kind_i != TokenKind.STATIC) & (pair | timed))
        base &= rule
    return base | diag


def count_allowed(spec: MaskSpec) -> int:
    """Exact number of allowed (query, key) pairs, in O(T)."""
    if spec.mode is Mode.INFERENCE and np.all(spec.segments == 0):
        return inference_pair_count(spec.context_length, spec.candidate_count)
    rows = compile_rows(spec)
    return int(rows.count())


def inference_pair_count(context_length: int, candidate_count: int) -> int:
    L, N = context_length, candidate_count
    return L * (L + 1) // 2 + N * (L + 1)


# ---------------------------------------------------------------------------
# row-interval form
# ---------------------------------------------------------------------------


class RowIntervals(NamedTuple):
    """Row ``i`` may attend to keys in ``[lo[i], hi[i])``, to ``i`` and to ``extra[i]`` (if >= 0)."""

    lo: np.ndarray
    hi: np.ndarray
    extra: np.ndarray

    def count(self) -> int:
        n = len(self.lo)
        idx = np.arange(n)
        width = np.maximum(self.hi - self.lo, 0)
        diag_inside = (self.lo <= idx) & (idx < self.hi)
        ex = self.extra >= 0
        ex_new = ex & (self.extra != idx) & ~((self.lo <= self.extra) & (self.extra < self.hi))
        return int(width.sum() + np.count_nonzero(~diag_inside) + np.count_nonzero(ex_new))

    def row_mask(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Boolean block for the given row and column index vectors."""
        c = cols[None, :]
        r = rows[:, None]
        return ((self.lo[rows, None] <= c) & (c < self.hi[rows, None])) | (c == r) | (c == self.extra[rows, None])

    def tile_masked(self, r0: int, r1: int, c0: int, c1: int) -> bool:
        """True iff no cell of rows ``[r0,r1)`` x cols ``[c0,c1)`` is allowed."""
        if max(r0, c0) < min(r1, c1):
            return False  # tile touches the diagonal
        lo = self.lo[r0:r1]
        hi = self.hi[r0:r1]
        if np.any(np.maximum(lo, c0) < np.minimum(hi, c1)):
            return False
        ex = self.extra[r0:r1]
        return not np.any((ex >= c0) & (ex < c1))


def compile_rows(spec: MaskSpec) -> RowIntervals:
    n = len(spec)
    lo = np.zeros(n, np.int64)
    hi = np.zeros(n, np.int64)
    extra = np.full(n, -1, np.int64)
    seg = spec.segments
    delay = spec.row_delay
    kinds = spec.kinds
    ts = spec.timestamps
    boundaries = np.flatnonzero(np.diff(seg) != 0) + 1
    starts = np.concatenate([[0], boundaries]) if n else np.zeros(0, np.int64)
    ends = np.concatenate([boundaries, [n]]) if n else np.zeros(0, np.int64)
    for s, e in zip(starts, ends):
        s, e = int(s), int(e)
        if seg[s] < 0:
            continue  # padding rows keep the empty interval
        cand = spec.candidates[s:e]
        ctx_end = s + (int(np.argmax(cand)) if cand.any() else e - s)
        if cand[ctx_end - s :].sum() != e - ctx_end:
            raise ValueError("candidates must form a contiguous tail of their sequence")
        rows = np.arange(s, e)
        lo[s:e] = s
        if spec.mode is Mode.INFERENCE:
            hi[s:e] = np.where(spec.candidates[s:e], ctx_end, rows)
            continue
        is_static = kinds[s:e] == TokenKind.STATIC
        static_end = s + (int(np.argmin(is_static)) if not is_static.all() else e - s)
        if is_static[static_end - s :].any():
            raise ValueError("static tokens must form a prefix of their sequence")
        ev_ts = ts[static_end:ctx_end]
        if np.any(np.diff(ev_ts) < 0):
            raise OrderingError("event timestamps must be non-decreasing within a sequence")
        # first event key newer than t_i - delay_i
        time_end = static_end + np.searchsorted(ev_ts, ts[s:e] - delay[s:e], side="right")
        event_hi = np.minimum(np.minimum(time_end, rows), ctx_end)
        hi[s:e] = np.where(is_static, rows, np.maximum(static_end, event_hi))
        if not spec.strict_pairing:
            extra[s:e] = spec.pair[s:e]
    return RowIntervals(lo, hi, extra)


def enumerate_tiles(n_rows: int, n_cols: int, tile: int):
    for r0 in range(0, n_rows, tile):
        for c0 in range(0, n_cols, tile):
            yield r0, min(r0 + tile, n_rows), c0, min(c0 + tile, n_cols)
