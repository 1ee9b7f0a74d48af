"""Context-conditioned prediction towers, auxiliary heads, and the combined
training objective with a cross-user RankNet term."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import Parameter, gelu, gelu_backward, log_sigmoid, sigmoid

AUX_TASKS = {"long_dwell": "binary", "duration": "regression"}


class RoutingError(IndexError):
    """Context bucket outside ``[1, K]``."""


@dataclass
class LossWeights:
    lambda_ctx: float = 1.0
    lambda_aux: tuple[float, ...] = (0.1, 0.1)
    lambda_pair: float = 0.1

    def __post_init__(self) -> None:
        ws = (self.lambda_ctx, *self.lambda_aux, self.lambda_pair)
        if any(w < 0 for w in ws):
            raise ValueError("loss weights must be non-negative")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class PredictionSet:
    """``context_logits[..., k-1]`` is the bucket-k logit; aux outputs are raw."""

    context_logits: np.ndarray
    aux_outputs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def K(self) -> int:
        return self.context_logits.shape[-1]

    def __getitem__(self, idx) -> "PredictionSet":
        aux = self.aux_outputs[idx] if self.aux_outputs.size else self.aux_outputs
        return PredictionSet(self.context_logits[idx], aux)


def _mlp_names(tag: str) -> tuple[str, str, str, str]:
    return (f"heads.{tag}.W1", f"heads.{tag}.b1", f"heads.{tag}.W2", f"heads.{tag}.b2")


def head_tags(K: int, aux_tasks: Sequence[str]) -> list[str]:
    return [f"ctx{k}" for k in range(1, K + 1)] + [f"aux_{t}" for t in aux_tasks]


def init_head_params(
    d_model: int, K: int, aux_tasks: Sequence[str], rng: np.random.Generator, dtype=np.float64, hidden: int | None = None
) -> dict[str, Parameter]:
    hidden = hidden or max(d_model // 2, 1)
    out = {}
    for tag in head_tags(K, aux_tasks):
        w1, b1, w2, b2 = _mlp_names(tag)
        out[w1] = Parameter(w1, (rng.standard_normal((d_model, hidden)) / math.sqrt(d_model)).astype(dtype))
        out[b1] = Parameter(b1, np.zeros(hidden, dtype))
        out[w2] = Parameter(w2, (rng.standard_normal((hidden, 1)) / math.sqrt(hidden)).astype(dtype))
        out[b2] = Parameter(b2, np.zeros(1, dtype))
    return out


def _mlp_forward(h, params, tag):
    w1, b1, w2, b2 = (params[n] for n in _mlp_names(tag))
    pre = h @ w1.value + b1.value
    act, t = gelu(pre)
    return (act @ w2.value + b2.value)[:, 0], (pre, act, t)


def _mlp_backward(h, params, tag, cache, grad):
    w1, b1, w2, b2 = (params[n] for n in _mlp_names(tag))
    pre, act, t = cache
    g = grad[:, None]
    w2.grad += act.T @ g
    b2.grad += g.sum(axis=0)
    dact = g @ w2.value.T
    dpre = gelu_backward(pre, t, dact)
    w1.grad += h.T @ dpre
    b1.grad += dpre.sum(axis=0)
    return dpre @ w1.value.T


def predict_all_heads(h: np.ndarray, params: dict[str, Parameter], K: int, aux_tasks: Sequence[str] = ()):
    """All K context logits and J auxiliary outputs for each row of ``h``.

    Returns ``(PredictionSet, cache)``. Nothing about the realized context is
    an input here: buckets only route the loss.
    """
    h2 = np.atleast_2d(h)
    caches = {}
    ctx = np.empty((h2.shape[0], K), dtype=h2.dtype)
    for k in range(K):
        ctx[:, k], caches[f"ctx{k + 1}"] = _mlp_forward(h2, params, f"ctx{k + 1}")
    aux = np.empty((h2.shape[0], len(aux_tasks)), dtype=h2.dtype)
    for j, task in enumerate(aux_tasks):
        aux[:, j], caches[f"aux_{task}"] = _mlp_forward(h2, params, f"aux_{task}")
    pred = PredictionSet(ctx, aux)
    if np.ndim(h) == 1:
        pred = pred[0]
    return pred, (h2, caches, K, tuple(aux_tasks))


def predict_all_heads_backward(cache, d_ctx: np.ndarray, d_aux: np.ndarray | None, params) -> np.ndarray:
    h2, caches, K, aux_tasks = cache
    dh = np.zeros_like(h2)
    d_ctx = np.atleast_2d(d_ctx)
    for k in range(K):
        if np.any(d_ctx[:, k]):
            dh += _mlp_backward(h2, params, f"ctx{k + 1}", caches[f"ctx{k + 1}"], d_ctx[:, k])
    if d_aux is not None:
        d_aux = np.atleast_2d(d_aux)
        for j, task in enumerate(aux_tasks):
            dh += _mlp_backward(h2, params, f"aux_{task}", caches[f"aux_{task}"], d_aux[:, j])
    return dh


# ---------------------------------------------------------------------------
# losses; each returns (value, gradient wrt its logits)
# ---------------------------------------------------------------------------


def bce_with_logits(z, y):
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.logaddexp(0.0, z) - y * z, sigmoid(z) - y


def route(context_logits: np.ndarray, buckets: Sequence[int]) -> np.ndarray:
    """Pick ``logits[t, k_t - 1]`` per impression."""
    b = np.asarray(buckets, dtype=np.int64)
    K = context_logits.shape[-1]
    if b.size and (b.min() < 1 or b.max() > K):
        raise RoutingError(f"context bucket out of range [1, {K}]: {b.min()}..{b.max()}")
    return context_logits[np.arange(len(b)), b - 1]


def context_loss(context_logits: np.ndarray, buckets: Sequence[int], labels: Sequence[int], reduction: str = "sum"):
    """Cross-entropy of the realized bucket's head only.

    Returns ``(loss, d_loss/d_context_logits)``; columns of unrealized heads
    get exactly zero gradient.
    """
    logits = np.atleast_2d(context_logits)
    if len(buckets) != logits.shape[0] or len(labels) != logits.shape[0]:
        raise ValueError("predictions, buckets and labels must have equal length")
    z = route(logits, buckets)
    ce, dz = bce_with_logits(z, labels)
    norm = 1.0 if reduction == "sum" else 1.0 / max(len(z), 1)
    grad = np.zeros(logits.shape, dtype=np.float64)
    grad[np.arange(len(z)), np.asarray(buckets) - 1] = dz * norm
    return float(ce.sum() * norm), grad


def pairwise_loss(z_pos: Sequence[float], z_neg: Sequence[float]):
    """RankNet over every (positive, negative) pair in the batch.

    Returns ``(loss, d/dz_pos, d/dz_neg, applied)``; with no positives or no
    negatives the term is undefined and comes back as 0 with ``applied=False``.
    """
    zp = np.asarray(z_pos, dtype=np.float64)
    zn = np.asarray(z_neg, dtype=np.float64)
    if zp.size == 0 or zn.size == 0:
        return 0.0, np.zeros_like(zp), np.zeros_like(zn), False
    diff = zp[:, None] - zn[None, :]
    norm = 1.0 / (zp.size * zn.size)
    loss = -log_sigmoid(diff).sum() * norm
    w = sigmoid(-diff) * norm  # -d/d(diff) of log sigma(diff)
    return float(loss), -w.sum(axis=1), w.sum(axis=0), True


def aux_loss(task: str, outputs: np.ndarray, targets: np.ndarray):
    """Mean loss for one auxiliary task and its gradient."""
    n = max(len(outputs), 1)
    kind = AUX_TASKS[task]
    if kind == "binary":
        ce, g = bce_with_logits(outputs, targets)
        return float(ce.sum() / n), g / n
    err = np.asarray(outputs, np.float64) - np.asarray(targets, np.float64)
    return float(0.5 * (err * err).sum() / n), err / n


def total_loss(ctx: float, aux: Sequence[float], pair: float, weights: LossWeights) -> float:
    if len(aux) != len(weights.lambda_aux):
        raise ValueError("one lambda per auxiliary loss required")
    return weights.lambda_ctx * ctx + sum(w * a for w, a in zip(weights.lambda_aux, aux)) + weights.lambda_pair * pair


def serve_select(prediction: PredictionSet, target_bucket: int):
    """Serving-time lookup of the bucket-k logit; no recomputation."""
    K = prediction.K
    if not 1 <= target_bucket <= K:
        raise RoutingError(f"target bucket {target_bucket} outside [1, {K}]")
    return prediction.context_logits[..., target_bucket - 1]
