import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cadet.batching import OversizeSequenceError, chunk, chunk_cost_report, pack
from cadet.events import TokenKind


def seq(n, start=0):
    return {"x": np.arange(start, start + n), "kind": np.full(n, int(TokenKind.IMPRESSION), np.int8)}


def test_pack_figure_example():
    [b] = pack([seq(5), seq(3), seq(6)], 16)
    assert b.offsets == [0, 5, 8, 14]
    assert b.pad_count == 2 and b.seq_lengths == [5, 3, 6]
    assert len(b.tokens["x"]) == 16
    assert list(b.segments) == [0] * 5 + [1] * 3 + [2] * 6 + [-1, -1]
    assert list(b.tokens["kind"][-2:]) == [TokenKind.PAD] * 2


def test_pack_greedy_split():
    batches = pack([seq(10), seq(10)], 16)
    assert [b.pad_count for b in batches] == [6, 6]


def test_pack_empty():
    assert pack([], 16) == []


def test_pack_oversize_directs_to_chunker():
    with pytest.raises(OversizeSequenceError, match="chunk"):
        pack([seq(17)], 16)


@given(st.lists(st.integers(1, 20), max_size=30), st.integers(20, 64))
def test_pack_invariants(lengths, budget):
    seqs = [seq(n, start=1000 * i) for i, n in enumerate(lengths)]
    batches = pack(seqs, budget)
    assert all(len(b.tokens["x"]) == budget for b in batches)
    flat = [b.sequence(s)["x"] for b in batches for s in range(b.n_seqs)]
    assert len(flat) == len(seqs)
    for got, want in zip(flat, seqs):
        assert np.array_equal(got, want["x"])
    # a batch closes only when the next sequence would overflow it
    for b, nxt in zip(batches, batches[1:]):
        assert b.offsets[-1] + nxt.seq_lengths[0] > budget


def test_chunk_examples():
    plan = chunk(10, 4)
    assert plan.chunks == [(6, 10), (2, 6), (0, 2)]
    assert chunk(8, 4).chunks == [(4, 8), (0, 4)]
    assert len(chunk(4096, 2048).chunks) == 2


@given(st.integers(1, 300), st.integers(1, 64))
def test_chunk_round_trip(L, Lc):
    plan = chunk(L, Lc)
    data = list(range(L))
    assert plan.reassemble(data) == data
    sizes = [b - a for a, b in plan.chunks]
    assert len(sizes) == -(-L // Lc)
    assert all(s == Lc for s in sizes[:-1])


@given(st.lists(st.booleans(), min_size=1, max_size=80), st.integers(2, 16))
def test_chunk_never_orphans_actions(labeled, Lc):
    kinds = []
    for has_action in labeled:
        kinds.append(int(TokenKind.IMPRESSION))
        if has_action:
            kinds.append(int(TokenKind.ACTION))
    plan = chunk(len(kinds), Lc, kinds=kinds)
    assert plan.reassemble(kinds) == kinds
    for a, b in plan.chunks:
        assert kinds[a] != TokenKind.ACTION
        assert b - a <= Lc


def test_chunk_rejects_bad_lengths():
    with pytest.raises(ValueError):
        chunk(0, 4)


def test_chunk_cost_examples():
    r = chunk_cost_report(4096, 2048)
    assert r["unchunked_pairs"] == 8_390_656
    assert r["total_pairs"] == 4_196_352 and r["per_chunk_pairs"] == [2_098_176, 2_098_176]
    assert r["dense_reduction"] == 2.0
    assert r["reduction_vs_unchunked"] == pytest.approx(2.0, abs=1e-3)
    assert chunk_cost_report(100, 100)["reduction_vs_unchunked"] == 1.0
    assert chunk_cost_report(37, 1)["total_pairs"] == 37
