import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cadet.attention import (
    TileConfig,
    init_attention_params,
    interaction_gate,
    mha_backward,
    mha_forward,
    op_count,
    reference_attend,
    representation_gate,
    tile_stats,
    tiled_attend,
)
from cadet.masking import MaskSpec, Mode, allowed_matrix, compile_rows, enumerate_tiles
from cadet.numerics import finite_diff_check, zero_grads
from cadet.rope import RopeConfig, TimeRotation

from strategies import HOUR, packed_spec

PREFIX = "attn"


def qkv(rng, n, heads=2, dk=4, dtype=np.float64):
    return tuple(rng.standard_normal((heads, n, dk)).astype(dtype) for _ in range(3))


# -- gates -------------------------------------------------------------------


def test_representation_gate_examples():
    assert np.array_equal(representation_gate(np.zeros((2, 3)), np.ones((3, 3))), np.zeros((2, 3)))
    assert representation_gate(np.array([[1.0]]), np.array([[0.0]]))[0, 0] == 0.5
    assert representation_gate(np.array([[2.0]]), np.array([[1.0]]))[0, 0] == pytest.approx(1.7615942, abs=1e-7)


def test_interaction_gate_examples(rng):
    q = rng.standard_normal((4, 3))
    k = rng.standard_normal((4, 3))
    qt, kt = interaction_gate(q, k, np.zeros((3, 3)), np.zeros((3, 3)))
    assert np.array_equal(qt, q / 2) and np.array_equal(kt, k / 2)
    qz, _ = interaction_gate(np.zeros((4, 3)), k, rng.standard_normal((3, 3)), np.eye(3))
    assert not qz.any()
    pos = np.abs(q) + 0.1
    qs, _ = interaction_gate(pos, pos, 1000 * np.eye(3), 1000 * np.eye(3))
    np.testing.assert_allclose(qs, pos, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_gates_never_amplify(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((5, 4)) * 3
    w = r.standard_normal((4, 4)) * 3
    assert np.all(np.abs(representation_gate(x, w)) <= np.abs(x))
    qt, kt = interaction_gate(x, -x, w, w.T)
    assert np.all(np.abs(qt) <= np.abs(x)) and np.all(np.abs(kt) <= np.abs(x))


# -- attention cores ---------------------------------------------------------


def test_tiled_matches_reference_small(rng, backend):
    spec = MaskSpec.inference(5, 3)
    for dtype, tol in ((np.float32, 1e-6), (np.float64, 1e-12)):
        q, k, v = qkv(rng, 8, dtype=dtype)
        ref, _ = reference_attend(q, k, v, spec)
        out = tiled_attend(q, k, v, spec, TileConfig(4, backend=backend)).output
        assert out.dtype == dtype
        np.testing.assert_allclose(out, ref, atol=tol, rtol=0)


def test_degenerate_tile_size_one(rng, backend):
    spec = MaskSpec.training(np.sort(rng.integers(0, 5 * HOUR, 11)), HOUR)
    q, k, v = qkv(rng, 11)
    ref, _ = reference_attend(q, k, v, spec)
    out = tiled_attend(q, k, v, spec, TileConfig(1, backend=backend)).output
    np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)


def test_uniform_scores_give_uniform_weights(rng):
    spec = MaskSpec.inference(6, 2)
    q = np.zeros((1, 8, 4))
    k, v = rng.standard_normal((1, 8, 4)), rng.standard_normal((1, 8, 4))
    _, p = reference_attend(q, k, v, spec)
    m = allowed_matrix(spec)
    np.testing.assert_allclose(p[0], m / m.sum(1, keepdims=True), atol=1e-15)


def test_tile_skip_example(rng, backend):
    spec = MaskSpec.inference(8, 4)
    rows = compile_rows(spec)
    skipped = [(r0, c0) for r0, r1, c0, c1 in enumerate_tiles(12, 12, 4) if rows.tile_masked(r0, r1, c0, c1)]
    assert skipped == [(0, 4), (0, 8), (4, 8)]
    assert tile_stats(spec, 4) == (6, 3)
    q, k, v = qkv(rng, 12)
    res = tiled_attend(q, k, v, spec, TileConfig(4, backend=backend))
    assert (res.tiles_visited, res.tiles_skipped) == (6, 3)


@given(packed_spec(max_tokens=40), st.sampled_from([1, 2, 4, 8, 16]), st.integers(0, 2**32 - 1))
def test_skipped_tiles_are_fully_masked(spec, tile, seed):
    m = allowed_matrix(spec)
    rows = compile_rows(spec)
    for r0, r1, c0, c1 in enumerate_tiles(len(spec), len(spec), tile):
        if rows.tile_masked(r0, r1, c0, c1):
            assert not m[r0:r1, c0:c1].any()
        else:
            assert m[r0:r1, c0:c1].any()


@pytest.mark.parametrize("name", ["python", "compiled"])
@given(data=st.data())
def test_engines_agree_on_random_masks(name, data):
    from cadet.attention import HAVE_COMPILED

    if name == "compiled" and not HAVE_COMPILED:
        pytest.skip("compiled core not built")
    spec = data.draw(packed_spec(max_tokens=64))
    tile = data.draw(st.sampled_from([1, 2, 4, 8, 16]))
    r = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    q, k, v = qkv(r, len(spec))
    ref, p = reference_attend(q, k, v, spec)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)
    res = tiled_attend(q, k, v, spec, TileConfig(tile, backend=name))
    np.testing.assert_allclose(res.output, ref, atol=1e-12, rtol=0)
    # score-level gradients agree too
    do = r.standard_normal(ref.shape)
    from cadet.attention.layer import tiled_attend_backward

    dq, dk, dv = tiled_attend_backward(q, k, v, res, do, compile_rows(spec), TileConfig(tile, backend=name))
    scale = 1 / math.sqrt(q.shape[-1])
    dp = do @ v.transpose(0, 2, 1)
    ds = p * (dp - (dp * p).sum(-1, keepdims=True)) * scale
    np.testing.assert_allclose(dv, p.transpose(0, 2, 1) @ do, atol=1e-11)
    np.testing.assert_allclose(dq, ds @ k, atol=1e-11)
    np.testing.assert_allclose(dk, ds.transpose(0, 2, 1) @ q, atol=1e-11)


def test_op_count_examples():
    c = op_count(MaskSpec.inference(4096, 512))
    assert (c.dense_pairs, c.sparse_pairs) == (21_233_664, 10_488_320)
    assert c.ratio == pytest.approx(2.025, abs=5e-4)
    c0 = op_count(MaskSpec.inference(0, 9))
    assert (c0.dense_pairs, c0.sparse_pairs) == (81, 9)
    big = op_count(MaskSpec.inference(20_000, 0))
    assert big.ratio == pytest.approx(2.0, abs=1e-3)


# -- full layer --------------------------------------------------------------


def layer(rng, d=8, scale=1.0):
    params = init_attention_params(PREFIX, d, rng)
    for p in params.values():
        p.value *= scale
    return params


def run(x, params, spec, engine="tiled", tile=4, rotation=None, backend=None, gating="both"):
    return mha_forward(x, params, PREFIX, 2, spec, rotation, TileConfig(tile, engine, backend), gating)


def test_single_token_attends_to_itself(rng):
    params = layer(rng)
    x = rng.standard_normal((1, 8))
    out, cache = run(x, params, MaskSpec.training([0]), engine="reference")
    xt = representation_gate(x, params["attn.W_X_gate"].value)
    v = xt @ params["attn.W_V"].value
    np.testing.assert_allclose(out, v @ params["attn.W_O"].value, atol=1e-12)


def test_identical_rows_give_identical_outputs(rng):
    params = layer(rng)
    x = np.tile(rng.standard_normal((1, 8)), (6, 1))
    out, _ = run(x, params, MaskSpec.training(np.zeros(6, np.int64), 0))
    np.testing.assert_allclose(out, np.tile(out[:1], (6, 1)), atol=1e-9)


@pytest.mark.parametrize("gating", ["both", "representation", "none"])
def test_engines_agree_through_layer(rng, backend, gating):
    params = layer(rng)
    ts = np.sort(rng.integers(0, 6 * HOUR, 16))
    spec = MaskSpec.training(ts, HOUR)
    rot = TimeRotation(ts, RopeConfig(86_400_000, 1e-2, 1e4, 4))
    x = rng.standard_normal((16, 8))
    a, _ = run(x, params, spec, "reference", rotation=rot, gating=gating)
    b, _ = run(x, params, spec, "tiled", rotation=rot, backend=backend, gating=gating)
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


def test_zero_upstream_gives_zero_grads(rng):
    params = layer(rng)
    x = rng.standard_normal((5, 8))
    _, cache = run(x, params, MaskSpec.training(np.arange(5) * HOUR, HOUR))
    zero_grads(params.values())
    dx = mha_backward(cache, np.zeros((5, 8)), params)
    assert not dx.any() and not any(p.grad.any() for p in params.values())


def _layer_grad_error(rng, x, params, spec, rotation, engine, backend=None, n_samples=None):
    w = rng.standard_normal(x.shape)
    from cadet.numerics import Parameter

    xp = Parameter("x", x.copy())
    out, cache = run(xp.value, params, spec, engine, rotation=rotation, backend=backend)
    zero_grads(list(params.values()) + [xp])
    xp.grad[:] = mha_backward(cache, w, params)
    everything = list(params.values()) + [xp]

    def loss():
        return float((run(xp.value, params, spec, engine, rotation=rotation, backend=backend)[0] * w).sum())

    return finite_diff_check(loss, everything, n_samples=n_samples, rng=np.random.default_rng(3))


def test_two_token_scaled_identity_gradients(rng):
    params = layer(rng, d=2)
    for p in params.values():
        p.value[:] = 0.7 * np.eye(2)
    spec = MaskSpec.training([0, 0], 0)
    x = np.array([[0.3, -1.2], [0.8, 0.5]])
    err = _layer_grad_error(rng, x, params, spec, None, "reference")
    assert err < 1e-6


@pytest.mark.parametrize("engine", ["reference", "tiled"])
def test_full_layer_gradients(rng, engine, backend):
    params = layer(rng, scale=2.0)
    ts = np.sort(rng.integers(0, 6 * HOUR, 16))
    spec = MaskSpec.training(ts, HOUR)
    rot = TimeRotation(ts, RopeConfig(86_400_000, 1e-2, 1e4, 4))
    x = rng.standard_normal((16, 8))
    err = _layer_grad_error(rng, x, params, spec, rot, engine, backend, n_samples=100)
    assert err < 1e-5


def test_candidate_permutation_equivariance(rng, backend):
    params = layer(rng)
    L, N = 6, 4
    ts = np.concatenate([np.arange(L) * HOUR, np.full(N, 10 * HOUR)])
    spec = MaskSpec.inference(L, N, timestamps=ts)
    rot = TimeRotation(ts, RopeConfig(86_400_000, 1e-2, 1e4, 4))
    x = rng.standard_normal((L + N, 8))
    perm = np.concatenate([np.arange(L), L + rng.permutation(N)])
    a, _ = run(x, params, spec, rotation=rot, backend=backend)
    b, _ = run(x[perm], params, spec, rotation=rot, backend=backend)
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_tile_config_validation():
    with pytest.raises(ValueError):
        TileConfig(0)
    with pytest.raises(ValueError):
        TileConfig(4, "flash")


def test_backend_selection():
    from cadet.attention import get_backend

    assert get_backend("python")[0].__module__.endswith("_tiled_py")
    with pytest.raises(ValueError):
        get_backend("gpu")


def test_training_spec_with_static_prefix(rng, backend):
    kinds = [0, 0, 1, 2, 1, 2, 1]
    ts = [0, 0, HOUR, HOUR, 3 * HOUR, 3 * HOUR, 3 * HOUR + 5]
    spec = MaskSpec.training(ts, HOUR, kinds=kinds)
    assert spec.mode is Mode.TRAINING
    q, k, v = qkv(rng, 7)
    ref, _ = reference_attend(q, k, v, spec)
    out = tiled_attend(q, k, v, spec, TileConfig(2, backend=backend)).output
    np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)
