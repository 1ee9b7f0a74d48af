"""Dense numeric substrate: checked array ops, hand-written layer backward
passes, Adam, and a central-difference gradient oracle.

Arrays are plain ``numpy.ndarray`` values in row-major layout. Two precision
modes exist: ``"f64"`` for gradient verification and ``"f32"`` for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

Tensor = np.ndarray

PRECISIONS = {"f32": np.float32, "f64": np.float64}


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class DegenerateRowError(ValueError):
    """A softmax row has no finite entry."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf appeared where only finite values are allowed."""


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s) in array of shape {np.shape(x)}")
    return x


# ---------------------------------------------------------------------------
# elementwise / matrix ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with batching over equal leading dims."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"batch dimensions disagree: {a.shape[:-2]} vs {b.shape[:-2]}")
    return a @ b


def matmul_backward(a: Tensor, b: Tensor, grad_out: Tensor) -> tuple[Tensor, Tensor]:
    """Gradients of ``a @ b`` w.r.t. both operands (2-d or equal-batch)."""
    grad_a = grad_out @ np.swapaxes(b, -1, -2)
    grad_b = np.swapaxes(a, -1, -2) @ grad_out
    return grad_a, grad_b


def sigmoid(x: Tensor) -> Tensor:
    """Overflow-free logistic function."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: Tensor, grad_out: Tensor) -> Tensor:
    return grad_out * y * (1.0 - y)


def log_sigmoid(x: Tensor) -> Tensor:
    return -np.logaddexp(0.0, -np.asarray(x))


def softmax_rows(scores: Tensor) -> Tensor:
    """Softmax over the last axis; ``-inf`` entries map to exactly 0."""
    scores = np.asarray(scores)
    row_max = scores.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise DegenerateRowError("softmax row has no finite entry")
    ex = np.exp(scores - row_max)
    return ex / ex.sum(axis=-1, keepdims=True)


def softmax_rows_backward(p: Tensor, grad_out: Tensor) -> Tensor:
    return p * (grad_out - (grad_out * p).sum(axis=-1, keepdims=True))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> tuple[Tensor, Tensor]:
    """tanh-approximated GELU. Returns (y, tanh term) for the backward pass."""
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def gelu_backward(x: Tensor, t: Tensor, grad_out: Tensor) -> Tensor:
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


# ---------------------------------------------------------------------------
# parameters and layers
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    name: str
    value: Tensor
    grad: Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def linear(x: Tensor, w: Parameter, b: Parameter | None = None) -> Tensor:
    y = matmul(x, w.value)
    if b is not None:
        y = y + b.value
    return y


def linear_backward(x: Tensor, w: Parameter, b: Parameter | None, grad_out: Tensor) -> Tensor:
    """Accumulates into ``w.grad``/``b.grad``; returns the input gradient."""
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    w.grad += x2.T @ g2
    if b is not None:
        b.grad += g2.sum(axis=0)
    return grad_out @ w.value.T


def layer_norm(x: Tensor, gain: Parameter, bias: Parameter, eps: float = 1e-5) -> tuple[Tensor, tuple]:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain.value + bias.value, (xhat, rstd)


def layer_norm_backward(cache: tuple, gain: Parameter, bias: Parameter, grad_out: Tensor) -> Tensor:
    xhat, rstd = cache
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    gain.grad += (g2 * xhat.reshape(g2.shape)).sum(axis=0)
    bias.grad += g2.sum(axis=0)
    dxhat = grad_out * gain.value
    n = xhat.shape[-1]
    return rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n)


def embedding(table: Parameter, ids: Tensor) -> Tensor:
    return table.value[ids]


def embedding_backward(table: Parameter, ids: Tensor, grad_out: Tensor) -> None:
    np.add.at(table.grad, ids.reshape(-1), grad_out.reshape(-1, table.value.shape[-1]))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update. ``lr`` overrides ``state.lr`` (warmup)."""
    state.step_count += 1
    t = state.step_count
    lr = state.lr if lr is None else lr
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value -= (lr * step).astype(p.value.dtype, copy=False)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Sequence[Parameter],
    epsilon: float = 1e-5,
    n_samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between ``p.grad`` and central differences.

    ``loss_fn`` must recompute the scalar loss from the current parameter
    values; the analytic gradient has to be in ``p.grad`` already. With
    ``n_samples`` set, that many (param, index) coordinates are drawn
    uniformly over all scalars, otherwise every coordinate is checked.
    """
    for p in params:
        if p.value.dtype != np.float64:
            raise TypeError(f"finite differences need float64 parameters, {p.name} is {p.value.dtype}")
    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    if n_samples is None or n_samples >= total:
        flat = np.arange(total)
    else:
        rng = rng or np.random.default_rng(0)
        flat = np.sort(rng.choice(total, size=n_samples, replace=False))
    bounds = np.cumsum(sizes)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for f in flat:
        pi = int(np.searchsorted(bounds, f, side="right"))
        idx = int(f - (bounds[pi - 1] if pi else 0))
        p = params[pi]
        view = p.value.reshape(-1)
        orig = view[idx]
        view[idx] = orig + epsilon
        up = float(loss_fn())
        view[idx] = orig - epsilon
        down = float(loss_fn())
        view[idx] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NonFiniteError(f"loss is non-finite while probing {p.name}[{idx}]")
        numeric = (up - down) / (2.0 * epsilon)
        a = float(analytic[pi].reshape(-1)[idx])
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
