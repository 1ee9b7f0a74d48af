import math

import numpy as np
import pytest

from cadet.batching import pack
from cadet.events import GeneratorConfig, TokenKind, generate
from cadet.masking import train_allowed
from cadet.model import ModelConfig, encode, forward, init_params, inference_spec, mask_spec_for, target_rows
from cadet.rope import rotate

HOUR = 3_600_000


def tiny(**kw):
    base = dict(d_model=8, n_layers=1, n_heads=2, precision="f64", ad_vocab=32, feature_vocab=16, tile_size=4)
    return ModelConfig(**(base | kw))


def histories(n=6, seed=0, **kw):
    return generate(GeneratorConfig(n_users=n, seed=seed, span_days=2.0, sessions_per_day=2.0, **kw))


def short_seqs(config, hs, limit=40):
    return [s for s in (encode(h, config) for h in hs) if 1 < len(s["kind"]) <= limit]


# -- independent straight-line forward -----------------------------------------


def _ln(x, g, b):
    out = np.empty_like(x)
    for r in range(x.shape[0]):
        mu = sum(x[r]) / len(x[r])
        var = sum((v - mu) ** 2 for v in x[r]) / len(x[r])
        out[r] = [(v - mu) / math.sqrt(var + 1e-5) * g[c] + b[c] for c, v in enumerate(x[r])]
    return out


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def oracle_logits(tokens, P, config):
    V = {k: p.value for k, p in P.items()}
    T = len(tokens["kind"])
    d, H = config.d_model, config.n_heads
    dk = d // H
    x = np.zeros((T, d))
    for t in range(T):
        kind = tokens["kind"][t]
        x[t] = V["emb.type"][kind]
        if kind == TokenKind.IMPRESSION:
            x[t] += V["emb.ad"][tokens["ad"][t]]
            for s in range(tokens["req"].shape[1]):
                x[t] += V["emb.feature"][tokens["req"][t, s]]
        elif kind == TokenKind.ACTION:
            x[t] += V["emb.action"][tokens["click"][t]] + V["emb.bucket"][tokens["bucket"][t] - 1]
        else:
            x[t] += V["emb.static"][tokens["static"][t]]
    spec = mask_spec_for(tokens, np.zeros(T, np.int64), config)
    for l in range(config.n_layers):
        p = f"block{l}"
        a = f"{p}.attn"
        h = _ln(x, V[f"{p}.ln1.g"], V[f"{p}.ln1.b"])
        h = h * _sig(h @ V[f"{a}.W_X_gate"])
        q = h @ V[f"{a}.W_Q"]
        k = h @ V[f"{a}.W_K"]
        v = h @ V[f"{a}.W_V"]
        q = q * _sig(q @ V[f"{a}.W_Q_gate"])
        k = k * _sig(k @ V[f"{a}.W_K_gate"])
        o = np.zeros((T, d))
        for head in range(H):
            sl = slice(head * dk, (head + 1) * dk)
            qr = [rotate(q[t, sl], tokens["ts"][t], config.rope) for t in range(T)]
            kr = [rotate(k[t, sl], tokens["ts"][t], config.rope) for t in range(T)]
            for i in range(T):
                keys = [j for j in range(T) if train_allowed(i, j, spec)]
                s = np.array([qr[i] @ kr[j] / math.sqrt(dk) for j in keys])
                w = np.exp(s - s.max())
                w /= w.sum()
                o[i, sl] = sum(wj * v[j, sl] for wj, j in zip(w, keys))
        x = x + o @ V[f"{a}.W_O"]
        h2 = _ln(x, V[f"{p}.ln2.g"], V[f"{p}.ln2.b"])
        x = x + _gelu(h2 @ V[f"{p}.ffn.W1"] + V[f"{p}.ffn.b1"]) @ V[f"{p}.ffn.W2"] + V[f"{p}.ffn.b2"]
    hf = _ln(x, V["final_ln.g"], V["final_ln.b"])[target_rows(tokens)]
    out = np.zeros((len(hf), config.K))
    for k in range(config.K):
        w = f"heads.ctx{k + 1}"
        out[:, k] = (_gelu(hf @ V[f"{w}.W1"] + V[f"{w}.b1"]) @ V[f"{w}.W2"] + V[f"{w}.b2"])[:, 0]
    return out


def test_forward_matches_straight_line_oracle():
    config = tiny()
    [h] = generate(GeneratorConfig(n_users=1, seed=1, start_ms=1000, span_days=2.0, sessions_per_day=4.0))
    tokens = encode(h, config)
    assert len(tokens["kind"]) == 38
    params = init_params(config)
    got = forward(tokens, params, config).predictions.context_logits
    np.testing.assert_allclose(got, oracle_logits(tokens, params, config), atol=1e-12, rtol=0)


def test_zero_heads_give_zero_logits():
    config = tiny()
    params = init_params(config)
    for name, p in params.items():
        if name.startswith("heads."):
            p.value[:] = 0
    seq = short_seqs(config, histories())[0]
    assert not forward(seq, params, config).predictions.context_logits.any()


def test_packed_user_permutation():
    config = tiny(n_layers=2)
    params = init_params(config)
    seqs = short_seqs(config, histories(8))[:4]
    a = pack(seqs, 200)[0]
    b = pack(seqs[::-1], 200)[0]
    za = forward(a, params, config).predictions.context_logits
    zb = forward(b, params, config).predictions.context_logits
    per_a = np.split(za, np.cumsum([len(target_rows(s)) for s in seqs])[:-1])
    per_b = np.split(zb, np.cumsum([len(target_rows(s)) for s in seqs[::-1]])[:-1])
    for x, y in zip(per_a, per_b[::-1]):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_packed_equals_per_sequence_f32():
    config = tiny(n_layers=2, precision="f32")
    params = init_params(config)
    seqs = short_seqs(config, histories(10, seed=3))
    for batch in pack(seqs, 128):
        packed = forward(batch, params, config).predictions.context_logits
        alone = np.concatenate(
            [forward(batch.sequence(s), params, config).predictions.context_logits for s in range(batch.n_seqs)]
        )
        np.testing.assert_allclose(packed, alone, atol=1e-6, rtol=0)


def test_pad_tokens_carry_no_targets():
    config = tiny()
    [batch] = pack(short_seqs(config, histories(3))[:1], 64)
    rows = target_rows(batch.tokens)
    assert batch.pad_count > 0
    assert rows.max() < batch.offsets[-1]


def test_own_action_never_reaches_its_prediction():
    config = tiny(n_layers=2, strict_pairing=True)
    params = init_params(config)
    seq = short_seqs(config, histories(4))[0]
    base = forward(seq, params, config).predictions.context_logits
    rows = target_rows(seq)
    for r in rows:
        flipped = {k: v.copy() for k, v in seq.items()}
        flipped["click"][r + 1] = 1 - flipped["click"][r + 1]
        z = forward(flipped, params, config).predictions.context_logits
        idx = np.searchsorted(rows, r)
        np.testing.assert_array_equal(z[: idx + 1], base[: idx + 1])


def test_bucket_is_not_a_scoring_input():
    config = tiny()
    params = init_params(config)
    seq = short_seqs(config, histories(4))[0]
    rows = target_rows(seq)
    moved = {k: v.copy() for k, v in seq.items()}
    moved["bucket"][rows] = 3 - moved["bucket"][rows]
    a = forward(seq, params, config).predictions.context_logits
    b = forward(moved, params, config).predictions.context_logits
    np.testing.assert_array_equal(a, b)


def test_candidates_scored_in_one_pass():
    config = tiny()
    params = init_params(config)
    [h] = histories(1, seed=5)
    n = len(h.events) - 3
    tokens = encode(h, config, n_context=n, candidates=h.events[n:])
    spec = inference_spec(tokens)
    full = forward(tokens, params, config, spec=spec).predictions.context_logits[-3:]
    for c in range(3):
        single = encode(h, config, n_context=n, candidates=[h.events[n + c]])
        z = forward(single, params, config, spec=inference_spec(single)).predictions.context_logits[-1]
        np.testing.assert_allclose(full[c], z, atol=1e-12)


def test_eval_rows_keep_delay_without_session_mask():
    config = tiny(session_mask=False)
    [h] = histories(1)
    tokens = encode(h, config, eval_from=len(h.events) - 2)
    spec = mask_spec_for(tokens, np.zeros(len(tokens["kind"]), np.int64), config)
    ev = np.flatnonzero(tokens["eval"])
    assert len(ev) == 2
    assert (spec.row_delay[ev] == config.delta_delay_ms).all()
    assert (spec.row_delay[~tokens["eval"]] == 0).all()


def test_config_validation():
    with pytest.raises(ValueError):
        tiny(n_heads=3)
    with pytest.raises(ValueError):
        tiny(aux_tasks=("bogus",))
    with pytest.raises(ValueError):
        tiny(d_model=6, n_heads=2)
