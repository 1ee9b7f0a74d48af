"""Training, evaluation, ablation runs and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .batching import PackedBatch, chunk, pack
from .events import DAY_MS, GeneratorConfig, TokenKind, UserHistory, generate
from .heads import LossWeights, aux_loss, context_loss, pairwise_loss, route, total_loss
from .model import ModelConfig, backward, encode, forward, init_params
from .numerics import AdamState, NonFiniteError, Parameter, adam_step, sigmoid, zero_grads

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ABLATIONS = ("context", "rope", "mask", "pairwise")


class UndefinedMetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    ctx: float
    aux: list[float]
    pair: float
    total: float
    pair_applied: bool = True


def compute_loss(result, tokens, config: ModelConfig, with_grad: bool = True):
    """Combined objective for a forward result.

    The context term is averaged over impressions (not summed) so its scale
    does not depend on how many users were packed into the buffer.
    Returns ``(LossBreakdown, d_ctx, d_aux)``.
    """
    rows = result.rows
    logits = result.predictions.context_logits.astype(np.float64)
    labels = tokens["label"][rows]
    buckets = tokens["bucket"][rows] if config.context_heads else np.ones(len(rows), np.int64)
    w = config.loss_weights
    ctx, d_ctx = context_loss(logits, buckets, labels, reduction="mean")
    d_ctx *= w.lambda_ctx
    aux_vals = []
    d_aux = np.zeros((len(rows), len(config.aux_tasks)))
    for j, task in enumerate(config.aux_tasks):
        target = tokens["aux"][rows, j]
        val, g = aux_loss(task, result.predictions.aux_outputs[:, j].astype(np.float64), target)
        aux_vals.append(val)
        d_aux[:, j] = w.lambda_aux[j] * g
    z = route(logits, buckets)
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    pair, dzp, dzn, applied = pairwise_loss(z[pos], z[neg])
    if applied and w.lambda_pair:
        d_ctx[pos, buckets[pos] - 1] += w.lambda_pair * dzp
        d_ctx[neg, buckets[neg] - 1] += w.lambda_pair * dzn
    total = total_loss(ctx, aux_vals, pair, w)
    if not math.isfinite(total):
        raise NonFiniteError(f"non-finite loss: ctx={ctx} aux={aux_vals} pair={pair}")
    return LossBreakdown(ctx, aux_vals, pair, total, applied), d_ctx, d_aux


def _forward_backward(batch, params, config):
    zero_grads(params.values())
    result = forward(batch, params, config)
    tokens = batch.tokens if isinstance(batch, PackedBatch) else batch
    breakdown, d_ctx, d_aux = compute_loss(result, tokens, config)
    backward(result, d_ctx, d_aux, params, config)
    return breakdown, result, tokens


def loss_and_grad(batch, params: dict[str, Parameter], config: ModelConfig) -> LossBreakdown:
    """Total loss; parameter gradients are left in ``p.grad``."""
    return _forward_backward(batch, params, config)[0]


def loss_only(batch, params, config: ModelConfig) -> float:
    result = forward(batch, params, config)
    tokens = batch.tokens if isinstance(batch, PackedBatch) else batch
    return compute_loss(result, tokens, config)[0].total


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 100
    epochs: int = 4
    token_budget: int = 512
    chunk_length: int = 256
    seed: int = 0
    grad_clip: float = 1.0
    final_lr_fraction: float = 0.05  # linear decay target after warmup; 1.0 keeps lr flat

    def lr_at(self, step: int, total_steps: int | None = None) -> float:
        """Linear warmup, then linear decay to ``final_lr_fraction * lr`` at ``total_steps``."""
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.lr * step / self.warmup_steps
        if not total_steps or total_steps <= self.warmup_steps:
            return self.lr
        frac = min(1.0, (step - self.warmup_steps) / (total_steps - self.warmup_steps))
        return self.lr * (1.0 - (1.0 - self.final_lr_fraction) * frac)


def train_step(batch, params: dict[str, Parameter], optimizer: AdamState, config: ModelConfig, lr: float | None = None):
    """One teacher-forced step. Returns the loss breakdown before the update."""
    breakdown = loss_and_grad(batch, params, config)
    for p in params.values():
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"step {optimizer.step_count + 1}: non-finite gradient in {p.name}")
    adam_step(list(params.values()), optimizer, lr)
    return breakdown


def clip_gradients(params: Iterable[Parameter], max_norm: float) -> float:
    params = list(params)
    norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class BucketCalibration:
    bucket: int
    count: int
    mean_predicted: float
    empirical_ctr: float

    @property
    def error(self) -> float:
        return abs(self.mean_predicted - self.empirical_ctr)


@dataclass
class EvalReport:
    auc: float
    buckets: list[BucketCalibration]
    loss: LossBreakdown | None
    step: int
    n_impressions: int

    @property
    def calibration_error(self) -> float:
        return max((b.error for b in self.buckets), default=0.0)

    def rows(self) -> list[tuple[str, str]]:
        out = [("auc", f"{self.auc:.6f}"), ("calibration_error", f"{self.calibration_error:.6f}")]
        out += [("n_impressions", str(self.n_impressions)), ("step", str(self.step))]
        for b in self.buckets:
            out += [
                (f"bucket{b.bucket}.count", str(b.count)),
                (f"bucket{b.bucket}.mean_predicted", f"{b.mean_predicted:.6f}"),
                (f"bucket{b.bucket}.empirical_ctr", f"{b.empirical_ctr:.6f}"),
            ]
        if self.loss is not None:
            out += [("loss.ctx", f"{self.loss.ctx:.6f}"), ("loss.pair", f"{self.loss.pair:.6f}")]
            out += [(f"loss.aux{j}", f"{v:.6f}") for j, v in enumerate(self.loss.aux)]
            out += [("loss.total", f"{self.loss.total:.6f}")]
        return out


def calibration(probs: np.ndarray, labels: np.ndarray, buckets: np.ndarray, n_buckets: int) -> list[BucketCalibration]:
    out = []
    for k in range(1, n_buckets + 1):
        sel = buckets == k
        if not sel.any():
            continue
        out.append(BucketCalibration(k, int(sel.sum()), float(probs[sel].mean()), float(labels[sel].mean())))
    return out


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    train: list[dict[str, np.ndarray]]
    val: list[dict[str, np.ndarray]]
    cutoff_ms: int


def split_cutoff(histories: Sequence[UserHistory], holdout_ms: int = DAY_MS) -> int:
    newest = max((h.events[-1][0].timestamp_ms for h in histories if h.events), default=0)
    return newest - holdout_ms


def build_dataset(
    histories: Sequence[UserHistory], config: ModelConfig, train: TrainConfig, holdout_ms: int = DAY_MS
) -> Dataset:
    """Training chunks from events up to the cutoff; one validation sequence
    per user holding the whole history, with impressions after the cutoff
    flagged as evaluation rows."""
    cutoff = split_cutoff(histories, holdout_ms)
    train_seqs, val_seqs = [], []
    for h in histories:
        n_ctx = sum(1 for imp, _ in h.events if imp.timestamp_ms <= cutoff)
        if n_ctx:
            cols = encode(h, config, n_context=n_ctx)
            train_seqs.extend(_chunk_columns(cols, min(train.chunk_length, train.token_budget)))
        if n_ctx < len(h.events):
            cols = encode(h, config, eval_from=n_ctx)
            val_seqs.append(_keep_recent(cols, train.token_budget))
    return Dataset(train_seqs, val_seqs, cutoff)


def _take(cols, idx):
    return {k: v[idx] for k, v in cols.items()}


def _split_static(cols):
    static = cols["kind"] == TokenKind.STATIC
    return np.flatnonzero(static), np.flatnonzero(~static)


def _chunk_columns(cols, chunk_length: int) -> list[dict[str, np.ndarray]]:
    """Split a long sequence into chunks of events, each re-prefixed with the
    user's static tokens; chunks are independent examples."""
    static, events = _split_static(cols)
    if len(cols["kind"]) <= chunk_length or len(events) == 0:
        return [cols]
    plan = chunk(len(events), max(chunk_length - len(static), 2), kinds=cols["kind"][events])
    return [_take(cols, np.concatenate([static, events[a:b]])) for a, b in plan.chunks]


def _keep_recent(cols, budget: int):
    """Static prefix plus the newest events that fit in ``budget``."""
    if len(cols["kind"]) <= budget:
        return cols
    static, events = _split_static(cols)
    keep = events[len(events) - max(budget - len(static), 0) :]
    if len(keep) and cols["kind"][keep[0]] == TokenKind.ACTION:
        keep = keep[1:]
    return _take(cols, np.concatenate([static, keep]))


def make_batches(seqs, budget: int, rng: np.random.Generator | None = None) -> list[PackedBatch]:
    order = np.arange(len(seqs)) if rng is None else rng.permutation(len(seqs))
    return pack([seqs[i] for i in order], budget)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(val_batches: Sequence[PackedBatch], params, config: ModelConfig, step: int = 0) -> EvalReport:
    """Metrics over evaluation and candidate rows, scored with the routed
    (realized-bucket) logit as serving would."""
    logits, labels, buckets, losses = [], [], [], []
    for batch in val_batches:
        tokens = batch.tokens
        rows = np.flatnonzero((tokens["cand"] | tokens["eval"]) & (tokens["label"] >= 0))
        result = forward(batch, params, config, rows=rows)
        bk = tokens["bucket"][rows] if config.context_heads else np.ones(len(rows), np.int64)
        logits.append(route(result.predictions.context_logits.astype(np.float64), bk))
        labels.append(tokens["label"][rows])
        buckets.append(tokens["bucket"][rows])
        losses.append((len(rows), compute_loss(result, tokens, config)[0]))
    z = np.concatenate(logits) if logits else np.zeros(0)
    y = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    b = np.concatenate(buckets) if buckets else np.zeros(0, np.int64)
    p = sigmoid(z)
    n = sum(c for c, _ in losses) or 1
    mean = LossBreakdown(
        sum(c * l.ctx for c, l in losses) / n,
        [sum(c * l.aux[j] for c, l in losses) / n for j in range(len(config.aux_tasks))],
        sum(c * l.pair for c, l in losses) / n,
        sum(c * l.total for c, l in losses) / n,
    )
    return EvalReport(auc(z, y), calibration(p, y, b, config.n_buckets), mean, step, int(len(y)))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("step", "epoch", "lr", "loss_ctx", "loss_aux", "loss_pair", "loss_total", "train_auc")


def _fmt(v: float) -> str:
    return repr(float(v))


def train(
    dataset: Dataset,
    config: ModelConfig,
    train_cfg: TrainConfig,
    params: dict[str, Parameter] | None = None,
    metrics_path: str | Path | None = None,
    eval_every_epoch: bool = False,
):
    """Adam over shuffled packed batches. Returns (params, metric rows, per-epoch eval reports)."""
    params = params if params is not None else init_params(config)
    opt = AdamState(lr=train_cfg.lr)
    rng = np.random.default_rng([train_cfg.seed, 11])
    rows_out: list[tuple] = []
    reports = []
    val_batches = make_batches(dataset.val, train_cfg.token_budget)
    fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        if fh:
            fh.write("\t".join(METRIC_COLUMNS) + "\n")
        n_batches = len(make_batches(dataset.train, train_cfg.token_budget))
        total_steps = n_batches * train_cfg.epochs
        for epoch in range(train_cfg.epochs):
            for batch in make_batches(dataset.train, train_cfg.token_budget, rng):
                step = opt.step_count + 1
                lr = train_cfg.lr_at(step, total_steps)
                breakdown, result, tokens = _forward_backward(batch, params, config)
                for p in params.values():
                    if not np.all(np.isfinite(p.grad)):
                        raise NonFiniteError(f"step {step}: non-finite gradient in {p.name}")
                clip_gradients(params.values(), train_cfg.grad_clip)
                adam_step(list(params.values()), opt, lr)
                tr_auc = _batch_auc(result, tokens, config)
                row = (step, epoch, lr, breakdown.ctx, sum(breakdown.aux), breakdown.pair, breakdown.total, tr_auc)
                rows_out.append(row)
                if fh:
                    fh.write("\t".join([str(step), str(epoch)] + [_fmt(v) for v in row[2:]]) + "\n")
            if eval_every_epoch and val_batches:
                reports.append(evaluate(val_batches, params, config, opt.step_count))
                log.info("epoch %d auc=%.4f cal=%.4f", epoch, reports[-1].auc, reports[-1].calibration_error)
    finally:
        if fh:
            fh.close()
    return params, rows_out, reports


def _batch_auc(result, tokens, config) -> float:
    # scored before the update, from the same forward that produced the loss
    labels = tokens["label"][result.rows]
    bk = tokens["bucket"][result.rows] if config.context_heads else np.ones(len(result.rows), np.int64)
    try:
        return auc(route(result.predictions.context_logits.astype(np.float64), bk), labels)
    except UndefinedMetricError:
        return float("nan")


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def apply_ablations(config: ModelConfig, ablations: Iterable[str]) -> ModelConfig:
    ablations = set(ablations)
    unknown = ablations - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation(s) {sorted(unknown)}; choose from {ABLATIONS}")
    kw = {}
    if "context" in ablations:
        kw["context_heads"] = False
    if "rope" in ablations:
        kw["use_rope"] = False
    if "mask" in ablations:
        kw["session_mask"] = False
    if "pairwise" in ablations:
        kw["loss_weights"] = replace(config.loss_weights, lambda_pair=0.0)
    return config.with_(**kw)


@dataclass
class ExperimentResult:
    report: EvalReport
    metrics: list[tuple]
    params: dict[str, Parameter]
    config: ModelConfig


def run_experiment(
    histories: Sequence[UserHistory],
    config: ModelConfig,
    train_cfg: TrainConfig,
    ablations: Iterable[str] = (),
    metrics_path: str | Path | None = None,
) -> ExperimentResult:
    config = apply_ablations(config, ablations)
    dataset = build_dataset(histories, config, train_cfg)
    params, metrics, _ = train(dataset, config, train_cfg, metrics_path=metrics_path)
    report = evaluate(make_batches(dataset.val, train_cfg.token_budget), params, config, len(metrics))
    return ExperimentResult(report, metrics, params, config)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _config_json(config: ModelConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True)


def config_from_json(text: str) -> ModelConfig:
    d = json.loads(text)
    d["loss_weights"] = LossWeights(**{**d["loss_weights"], "lambda_aux": tuple(d["loss_weights"]["lambda_aux"])})
    for key in ("bucket_boundaries", "aux_tasks"):
        d[key] = tuple(d[key])
    return ModelConfig(**d)


def save_checkpoint(path: str | Path, params: dict[str, Parameter], config: ModelConfig) -> None:
    """npz holding a format version, the model config, and one array per named parameter."""
    arrays = {f"param/{name}": p.value for name, p in params.items()}
    np.savez(
        path,
        __format__=np.array("cadet-checkpoint"),
        __version__=np.array(CHECKPOINT_VERSION),
        __config__=np.array(_config_json(config)),
        **arrays,
    )


def load_checkpoint(path: str | Path) -> tuple[dict[str, Parameter], ModelConfig]:
    with np.load(path, allow_pickle=False) as z:
        if str(z["__format__"]) != "cadet-checkpoint":
            raise ValueError(f"{path}: not a cadet checkpoint")
        version = int(z["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = config_from_json(str(z["__config__"]))
        params = {}
        for key in z.files:
            if key.startswith("param/"):
                name = key[len("param/") :]
                params[name] = Parameter(name, np.array(z[key]))
    expected = set(init_params(config))
    if set(params) != expected:
        raise ValueError(f"{path}: parameter set does not match the stored config")
    return params, config


def gradcheck_problem(seed: int = 0, precision: str = "f64", qk_scale: float = 3.0):
    """Tiny packed batch, parameters and config for finite-difference checks.

    Query/key projections and their gates are scaled up so attention is far
    from uniform; at the default init the score-path gradients sit near the
    roundoff floor of central differences.
    """
    config = ModelConfig(
        d_model=8, n_layers=2, n_heads=2, precision=precision, ad_vocab=32, feature_vocab=16, tile_size=4, seed=seed
    )
    histories = generate(GeneratorConfig(n_users=12, seed=seed, span_days=2.0, sessions_per_day=2.0))
    seqs = [s for s in (encode(h, config) for h in histories) if 0 < len(s["kind"]) <= 48]
    batch = pack(seqs, 96)[0]
    params = init_params(config)
    for name, p in params.items():
        if name.rsplit(".", 1)[-1] in ("W_Q", "W_K", "W_Q_gate", "W_K_gate"):
            p.value *= qk_scale
    return batch, params, config


def default_generator(n_impressions: int = 50_000, seed: int = 0, **overrides) -> GeneratorConfig:
    """Generator sized to roughly ``n_impressions`` impressions."""
    cfg = GeneratorConfig(seed=seed, **overrides)
    per_user = cfg.sessions_per_day * cfg.span_days * cfg.impressions_per_session
    return replace(cfg, n_users=max(1, int(round(n_impressions / per_user))))


def synthetic_histories(n_impressions: int = 50_000, seed: int = 0, **overrides) -> list[UserHistory]:
    return generate(default_generator(n_impressions, seed, **overrides))
