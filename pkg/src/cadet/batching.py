"""Fixed-budget sequence packing and recency-anchored chunking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np

from .events import TokenKind


class OversizeSequenceError(ValueError):
    """A sequence is longer than the packing budget."""


@dataclass
class PackedBatch:
    tokens: dict[str, np.ndarray]  # each column has exactly token_budget rows
    offsets: list[int]
    seq_lengths: list[int]
    pad_count: int
    token_budget: int
    meta: list[Any] = field(default_factory=list)

    def __post_init__(self) -> None:
        assert self.offsets[0] == 0
        assert self.offsets[-1] + self.pad_count == self.token_budget
        assert sum(self.seq_lengths) == self.offsets[-1]
        assert all(a < b for a, b in zip(self.offsets, self.offsets[1:]))

    @property
    def n_seqs(self) -> int:
        return len(self.seq_lengths)

    @property
    def segments(self) -> np.ndarray:
        """Sequence index per token, -1 on padding."""
        seg = np.full(self.token_budget, -1, np.int64)
        for s, (a, b) in enumerate(zip(self.offsets, self.offsets[1:])):
            seg[a:b] = s
        return seg

    def sequence(self, s: int) -> dict[str, np.ndarray]:
        a, b = self.offsets[s], self.offsets[s + 1]
        return {k: v[a:b] for k, v in self.tokens.items()}


PAD_VALUES = {"kind": int(TokenKind.PAD), "label": -1, "bucket": 0}


def _seq_len(seq: Mapping[str, np.ndarray]) -> int:
    lengths = {len(v) for v in seq.values()}
    if len(lengths) != 1:
        raise ValueError(f"columns of one sequence differ in length: {sorted(lengths)}")
    return lengths.pop()


def _emit(group, token_budget, pad_values, meta) -> PackedBatch:
    lengths = [_seq_len(s) for s in group]
    used = sum(lengths)
    pad = token_budget - used
    cols = {}
    for name in group[0]:
        parts = [np.asarray(s[name]) for s in group]
        fill = pad_values.get(name, 0)
        tail = np.full((pad,) + parts[0].shape[1:], fill, dtype=parts[0].dtype)
        cols[name] = np.concatenate(parts + [tail])
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(int).tolist()
    return PackedBatch(cols, offsets, lengths, pad, token_budget, meta)


def pack(
    sequences: Sequence[Mapping[str, np.ndarray]],
    token_budget: int,
    pad_values: Mapping[str, Any] | None = None,
    meta: Sequence[Any] | None = None,
) -> list[PackedBatch]:
    """Greedy in-order aggregation; a batch is emitted once the next
    sequence would overflow the budget, then padded to exactly the budget."""
    pad_values = {**PAD_VALUES, **(pad_values or {})}
    batches: list[PackedBatch] = []
    group: list = []
    group_meta: list = []
    used = 0
    for n, seq in enumerate(sequences):
        length = _seq_len(seq)
        if length > token_budget:
            raise OversizeSequenceError(
                f"sequence {n} has {length} tokens > budget {token_budget}; split it with batching.chunk_sequence first"
            )
        if length == 0:
            continue
        if group and used + length > token_budget:
            batches.append(_emit(group, token_budget, pad_values, group_meta))
            group, group_meta, used = [], [], 0
        group.append(seq)
        group_meta.append(None if meta is None else meta[n])
        used += length
    if group:
        batches.append(_emit(group, token_budget, pad_values, group_meta))
    return batches


# ---------------------------------------------------------------------------
# chunking
# ---------------------------------------------------------------------------


class ChunkPlan(NamedTuple):
    source_length: int
    chunk_length: int
    chunks: list[tuple[int, int]]  # most recent first

    def reassemble(self, seq: Sequence) -> list:
        """Concatenate the chunks oldest-to-newest."""
        out: list = []
        for a, b in reversed(self.chunks):
            out.extend(seq[a:b])
        return out


def chunk(L: int, L_chunk: int, kinds: Sequence[int] | None = None) -> ChunkPlan:
    """Partition ``[0, L)`` backwards from the newest token.

    With ``kinds`` given, a boundary that would orphan an action token from
    its impression moves one token toward the newer side, so the action
    stays with its impression in the older chunk.
    """
    if L < 1 or L_chunk < 1:
        raise ValueError("L and L_chunk must be >= 1")
    chunks = []
    end = L
    while end > 0:
        start = max(end - L_chunk, 0)
        if kinds is not None and start > 0 and kinds[start] == TokenKind.ACTION and start + 1 < end:
            start += 1
        chunks.append((start, end))
        end = start
    return ChunkPlan(L, L_chunk, chunks)


def causal_pairs(n: int) -> int:
    return n * (n + 1) // 2


def chunk_cost_report(L: int, L_chunk: int) -> dict[str, float]:
    """Attention pair counts with and without chunking.

    ``dense_reduction`` compares full ``n^2`` score blocks (exactly
    ``L / L_chunk`` when it divides); ``reduction_vs_unchunked`` compares
    causal triangles, which include the diagonal and so fall slightly short.
    """
    plan = chunk(L, L_chunk)
    lengths = [b - a for a, b in plan.chunks]
    per_chunk = [causal_pairs(n) for n in lengths]
    total = sum(per_chunk)
    dense_total = sum(n * n for n in lengths)
    return {
        "n_chunks": len(plan.chunks),
        "per_chunk_pairs": per_chunk,
        "unchunked_pairs": causal_pairs(L),
        "total_pairs": total,
        "reduction_vs_unchunked": causal_pairs(L) / total,
        "dense_unchunked_pairs": L * L,
        "dense_total_pairs": dense_total,
        "dense_reduction": L * L / dense_total,
    }
