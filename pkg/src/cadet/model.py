"""Decoder-only CTR transformer over packed interleaved sequences.

Token embeddings feed pre-norm blocks (self-gated attention + GELU FFN, each
with a residual), a final norm, and the head bank at impression positions.
Every backward pass is hand-written.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import masking
from .attention import GATINGS, TileConfig, init_attention_params, mha_backward, mha_forward
from .batching import PackedBatch
from .events import TokenKind, UserHistory, interleave
from .heads import AUX_TASKS, LossWeights, PredictionSet, init_head_params, predict_all_heads, predict_all_heads_backward
from .masking import MaskSpec
from .numerics import (
    NonFiniteError,
    Parameter,
    check_finite,
    dtype_for,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    linear,
    linear_backward,
)
from .rope import RopeConfig, TimeRotation

DAY_MS = 86_400_000


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_multiplier: int = 4
    bucket_boundaries: tuple[int, ...] = (4,)
    context_heads: bool = True
    aux_tasks: tuple[str, ...] = ("long_dwell", "duration")
    use_rope: bool = True
    rope_delta_t_max_ms: int = 30 * DAY_MS
    rope_phi_min: float = 1e-3
    rope_base: float = 1e6
    delta_delay_ms: int = 3_600_000
    session_mask: bool = True
    strict_pairing: bool = False
    gating: str = "both"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ad_vocab: int = 1024
    feature_vocab: int = 256
    n_request_features: int = 1
    precision: str = "f32"
    engine: str = "tiled"
    tile_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.d_model, self.n_layers, self.n_heads, self.ffn_multiplier) < 1:
            raise ValueError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ValueError("per-head dimension must be even for rotary encoding")
        if self.gating not in GATINGS:
            raise ValueError(f"gating must be one of {GATINGS}")
        unknown = set(self.aux_tasks) - set(AUX_TASKS)
        if unknown:
            raise ValueError(f"unknown auxiliary tasks {sorted(unknown)}")
        if len(self.loss_weights.lambda_aux) != len(self.aux_tasks):
            raise ValueError("need one auxiliary loss weight per auxiliary task")
        dtype_for(self.precision)
        self.rope  # validates
        self.tile_config

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_buckets(self) -> int:
        return len(self.bucket_boundaries) + 1

    @property
    def K(self) -> int:
        """Number of prediction towers; one when context conditioning is off."""
        return self.n_buckets if self.context_heads else 1

    @property
    def dtype(self) -> np.dtype:
        return dtype_for(self.precision)

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.rope_delta_t_max_ms, self.rope_phi_min, self.rope_base, self.head_dim)

    @property
    def tile_config(self) -> TileConfig:
        return TileConfig(self.tile_size, self.engine)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(config: ModelConfig) -> dict[str, Parameter]:
    rng = np.random.default_rng([config.seed, 7])
    dt = config.dtype
    d = config.d_model
    params: dict[str, Parameter] = {}

    def add(name, value):
        params[name] = Parameter(name, np.ascontiguousarray(value, dtype=dt))

    emb_std = 0.5
    add("emb.type", rng.standard_normal((len(TokenKind), d)) * emb_std)
    add("emb.ad", rng.standard_normal((config.ad_vocab, d)) * emb_std)
    add("emb.feature", rng.standard_normal((config.feature_vocab, d)) * emb_std)
    add("emb.static", rng.standard_normal((config.feature_vocab, d)) * emb_std)
    add("emb.action", rng.standard_normal((2, d)) * emb_std)
    add("emb.bucket", rng.standard_normal((config.n_buckets, d)) * emb_std)
    hidden = config.ffn_multiplier * d
    for l in range(config.n_layers):
        p = f"block{l}"
        add(f"{p}.ln1.g", np.ones(d))
        add(f"{p}.ln1.b", np.zeros(d))
        params.update({k: Parameter(k, v.value.astype(dt)) for k, v in init_attention_params(f"{p}.attn", d, rng).items()})
        add(f"{p}.ln2.g", np.ones(d))
        add(f"{p}.ln2.b", np.zeros(d))
        add(f"{p}.ffn.W1", rng.standard_normal((d, hidden)) / math.sqrt(d))
        add(f"{p}.ffn.b1", np.zeros(hidden))
        add(f"{p}.ffn.W2", rng.standard_normal((hidden, d)) / math.sqrt(hidden) / math.sqrt(2 * config.n_layers))
        add(f"{p}.ffn.b2", np.zeros(d))
    add("final_ln.g", np.ones(d))
    add("final_ln.b", np.zeros(d))
    for k, v in init_head_params(d, config.K, config.aux_tasks, rng).items():
        add(k, v.value)
    return params


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

_H1, _H2 = 2654435761, 40503


def hash_id(value, slot: int, vocab: int):
    """Deterministic feature hashing; collisions are silent by design."""
    return (np.asarray(value, dtype=np.int64) * _H1 + slot * _H2 + 1) % vocab


def _impression_targets(action):
    if action is None:
        return -1, 0, (0.0, 0.0)
    long_dwell, duration = (tuple(action.aux_labels) + (0.0, 0.0))[:2]
    return action.action_label, action.context_bucket, (long_dwell, math.log(max(duration, 1e-3)))


def encode(
    history: UserHistory,
    config: ModelConfig,
    n_context: int | None = None,
    candidates: Sequence = (),
    eval_from: int | None = None,
) -> dict[str, np.ndarray]:
    """Column arrays for one user's token sequence.

    ``history.events[:n_context]`` become the interleaved context. Each
    ``candidates`` entry is an (Impression, action-or-None) pair appended as a
    causally isolated impression token; its action, if any, supplies only
    the evaluation target. Impressions of events at index ``>= eval_from``
    are flagged in the ``eval`` column: they stay in the sequence but always
    read history through the session delay.
    """
    ctx_events = history.events if n_context is None else history.events[:n_context]
    seq = interleave(UserHistory(history.user_id, history.static_features, list(ctx_events)))
    n_req = config.n_request_features
    T = len(seq.tokens) + len(candidates)
    cols = {
        "kind": np.zeros(T, np.int8),
        "ts": np.zeros(T, np.int64),
        "ad": np.zeros(T, np.int64),
        "req": np.zeros((T, n_req), np.int64),
        "static": np.zeros(T, np.int64),
        "click": np.zeros(T, np.int64),
        "bucket": np.zeros(T, np.int64),
        "label": np.full(T, -1, np.int64),
        "aux": np.zeros((T, 2), np.float64),
        "cand": np.zeros(T, bool),
        "eval": np.zeros(T, bool),
    }
    for pos, tok in enumerate(seq.tokens):
        cols["kind"][pos] = tok.kind
        cols["ts"][pos] = tok.timestamp_ms
        if tok.kind == TokenKind.STATIC:
            slot, value = tok.payload
            cols["static"][pos] = hash_id(value, slot, config.feature_vocab)
        elif tok.kind == TokenKind.IMPRESSION:
            ad, *req = tok.payload
            cols["ad"][pos] = hash_id(ad, 0, config.ad_vocab)
            for s in range(n_req):
                cols["req"][pos, s] = hash_id(req[s] if s < len(req) else 0, s + 1, config.feature_vocab)
            label, bucket, aux = _impression_targets(ctx_events[seq.impression_index[pos]][1])
            cols["label"][pos], cols["bucket"][pos] = label, bucket
            cols["aux"][pos] = aux
            cols["eval"][pos] = eval_from is not None and seq.impression_index[pos] >= eval_from
        else:
            cols["click"][pos], cols["bucket"][pos] = tok.payload
    base = len(seq.tokens)
    for n, (imp, act) in enumerate(candidates):
        pos = base + n
        cols["kind"][pos] = TokenKind.IMPRESSION
        cols["ts"][pos] = imp.timestamp_ms
        cols["ad"][pos] = hash_id(imp.ad_id, 0, config.ad_vocab)
        for s in range(n_req):
            cols["req"][pos, s] = hash_id(
                imp.request_features[s] if s < len(imp.request_features) else 0, s + 1, config.feature_vocab
            )
        label, bucket, aux = _impression_targets(act)
        cols["label"][pos], cols["bucket"][pos] = label, bucket
        cols["aux"][pos] = aux
        cols["cand"][pos] = True
    return cols


def target_rows(tokens: dict[str, np.ndarray]) -> np.ndarray:
    """Token positions that carry a prediction target."""
    return np.flatnonzero((tokens["kind"] == TokenKind.IMPRESSION) & (tokens["label"] >= 0))


def mask_spec_for(tokens: dict[str, np.ndarray], segments: np.ndarray, config: ModelConfig) -> MaskSpec:
    """Training mask; the session delay on candidate and evaluation rows is
    kept even when the training-row delay is switched off."""
    return MaskSpec(
        masking.Mode.TRAINING,
        tokens["ts"],
        tokens["kind"],
        segments,
        tokens["cand"],
        config.delta_delay_ms if config.session_mask else 0,
        config.delta_delay_ms,
        config.strict_pairing,
        tokens["eval"] if "eval" in tokens else None,
    )


def inference_spec(tokens: dict[str, np.ndarray], segments: np.ndarray | None = None) -> MaskSpec:
    """Serving mask: causal context, candidates see the context and themselves."""
    n = len(tokens["kind"])
    seg = np.zeros(n, np.int64) if segments is None else segments
    return MaskSpec(masking.Mode.INFERENCE, tokens["ts"], tokens["kind"], seg, tokens["cand"], 0)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _embed(tokens, params, config: ModelConfig):
    kind = tokens["kind"]
    x = params["emb.type"].value[kind].copy()
    imp = np.flatnonzero(kind == TokenKind.IMPRESSION)
    act = np.flatnonzero(kind == TokenKind.ACTION)
    sta = np.flatnonzero(kind == TokenKind.STATIC)
    x[imp] += params["emb.ad"].value[tokens["ad"][imp]]
    for s in range(tokens["req"].shape[1]):
        x[imp] += params["emb.feature"].value[tokens["req"][imp, s]]
    x[act] += params["emb.action"].value[tokens["click"][act]] + params["emb.bucket"].value[tokens["bucket"][act] - 1]
    x[sta] += params["emb.static"].value[tokens["static"][sta]]
    return x, (imp, act, sta)


def _embed_backward(tokens, params, idx, dx):
    imp, act, sta = idx
    np.add.at(params["emb.type"].grad, tokens["kind"], dx)
    np.add.at(params["emb.ad"].grad, tokens["ad"][imp], dx[imp])
    for s in range(tokens["req"].shape[1]):
        np.add.at(params["emb.feature"].grad, tokens["req"][imp, s], dx[imp])
    np.add.at(params["emb.action"].grad, tokens["click"][act], dx[act])
    np.add.at(params["emb.bucket"].grad, tokens["bucket"][act] - 1, dx[act])
    np.add.at(params["emb.static"].grad, tokens["static"][sta], dx[sta])


@dataclass
class ForwardResult:
    predictions: PredictionSet
    rows: np.ndarray  # token positions of the predictions
    cache: dict


def forward(
    batch: PackedBatch | dict,
    params: dict[str, Parameter],
    config: ModelConfig,
    rows: np.ndarray | None = None,
    segments: np.ndarray | None = None,
    spec: MaskSpec | None = None,
) -> ForwardResult:
    """Teacher-forced pass over a packed buffer (or a single column dict).

    Predictions are produced for ``rows`` (default: all labelled impression
    tokens) in one pass. ``spec`` overrides the training mask, e.g. with
    :func:`inference_spec`.
    """
    if isinstance(batch, PackedBatch):
        tokens, seg = batch.tokens, batch.segments
    else:
        tokens = batch
        seg = np.zeros(len(tokens["kind"]), np.int64) if segments is None else segments
    rows = target_rows(tokens) if rows is None else rows
    dt = config.dtype
    spec = mask_spec_for(tokens, seg, config) if spec is None else spec
    interval_rows = masking.compile_rows(spec)
    rotation = TimeRotation(tokens["ts"], config.rope, segments=seg, dtype=dt) if config.use_rope else None

    x, emb_idx = _embed(tokens, params, config)
    x = x.astype(dt, copy=False)
    blocks = []
    for l in range(config.n_layers):
        p = f"block{l}"
        h1, ln1 = layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        a, attn_cache = mha_forward(
            h1, params, f"{p}.attn", config.n_heads, spec, rotation, config.tile_config, config.gating, interval_rows
        )
        x = x + a
        h2, ln2 = layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        f1 = linear(h2, params[f"{p}.ffn.W1"], params[f"{p}.ffn.b1"])
        g, t = gelu(f1)
        f2 = linear(g, params[f"{p}.ffn.W2"], params[f"{p}.ffn.b2"])
        x = x + f2
        blocks.append((h1, ln1, attn_cache, h2, ln2, f1, g, t))
    hf, lnf = layer_norm(x, params["final_ln.g"], params["final_ln.b"])
    h = hf[rows]
    try:
        check_finite(h, "transformer output")
    except NonFiniteError as exc:
        raise NonFiniteError(f"forward: {exc}") from exc
    pred, head_cache = predict_all_heads(h, params, config.K, config.aux_tasks)
    cache = dict(tokens=tokens, emb_idx=emb_idx, blocks=blocks, lnf=lnf, n=len(tokens["kind"]), head_cache=head_cache)
    return ForwardResult(pred, rows, cache)


def backward(result: ForwardResult, d_ctx: np.ndarray, d_aux: np.ndarray | None, params, config: ModelConfig) -> None:
    """Accumulates parameter gradients from logit-level gradients."""
    cache = result.cache
    dt = config.dtype
    dh = predict_all_heads_backward(cache["head_cache"], d_ctx.astype(dt), None if d_aux is None else d_aux.astype(dt), params)
    dhf = np.zeros((cache["n"], config.d_model), dt)
    np.add.at(dhf, result.rows, dh)
    dx = layer_norm_backward(cache["lnf"], params["final_ln.g"], params["final_ln.b"], dhf)
    for l in reversed(range(config.n_layers)):
        p = f"block{l}"
        h1, ln1, attn_cache, h2, ln2, f1, g, t = cache["blocks"][l]
        dg = linear_backward(g, params[f"{p}.ffn.W2"], params[f"{p}.ffn.b2"], dx)
        df1 = gelu_backward(f1, t, dg)
        dh2 = linear_backward(h2, params[f"{p}.ffn.W1"], params[f"{p}.ffn.b1"], df1)
        dx = dx + layer_norm_backward(ln2, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], dh2)
        dh1 = mha_backward(attn_cache, dx, params)
        dx = dx + layer_norm_backward(ln1, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], dh1)
    _embed_backward(cache["tokens"], params, cache["emb_idx"], dx)
