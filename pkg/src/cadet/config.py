"""Layered ``key = value`` run configuration.

Keys carry a section prefix (``model.``, ``rope.``, ``mask.``, ``heads.``,
``attention.``, ``batching.``, ``train.``, ``data.``) plus a top-level
``seed``. Files are read first, flag overrides second, and the
``CADET_SEED`` environment variable last. Unknown keys are rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from .attention import ENGINES, GATINGS
from .heads import AUX_TASKS, LossWeights
from .model import ModelConfig
from .numerics import PRECISIONS
from .trainer import TrainConfig

SEED_ENV = "CADET_SEED"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _choice(options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {tuple(options)}, got {t!r}")
        return t

    return parse


def _opt_str(text: str) -> str | None:
    return None if text.strip().lower() in ("", "none") else text.strip()


# key -> parser; defaults come from the dataclasses
SCHEMA: dict[str, Callable[[str], Any]] = {
    "seed": int,
    "model.d_model": int,
    "model.n_layers": int,
    "model.n_heads": int,
    "model.ffn_multiplier": int,
    "model.precision": _choice(PRECISIONS),
    "model.ad_vocab": int,
    "model.feature_vocab": int,
    "model.n_request_features": int,
    "rope.enabled": _bool,
    "rope.delta_t_max_ms": int,
    "rope.phi_min": float,
    "rope.base": float,
    "mask.session_mask": _bool,
    "mask.delta_delay_ms": int,
    "mask.strict_pairing": _bool,
    "heads.K": int,
    "heads.bucket_boundaries": _ints,
    "heads.context_conditioned": _bool,
    "heads.lambda_ctx": float,
    "heads.lambda_aux": _floats,
    "heads.lambda_pair": float,
    "heads.aux_tasks": _strs,
    "attention.tile_size": int,
    "attention.engine": _choice(ENGINES),
    "attention.gating": _choice(GATINGS),
    "batching.token_budget": int,
    "batching.chunk_length": int,
    "train.lr": float,
    "train.warmup_steps": int,
    "train.epochs": int,
    "train.grad_clip": float,
    "train.final_lr_fraction": float,
    "data.path": _opt_str,
    "data.n_impressions": int,
    "data.position_bias": _floats,
    "data.session_effect": float,
    "data.recency_boost": float,
    "data.span_days": float,
    "data.holdout_ms": int,
}

# model fields that a key maps onto directly
_MODEL_KEYS = {
    "model.d_model": "d_model",
    "model.n_layers": "n_layers",
    "model.n_heads": "n_heads",
    "model.ffn_multiplier": "ffn_multiplier",
    "model.precision": "precision",
    "model.ad_vocab": "ad_vocab",
    "model.feature_vocab": "feature_vocab",
    "model.n_request_features": "n_request_features",
    "rope.enabled": "use_rope",
    "rope.delta_t_max_ms": "rope_delta_t_max_ms",
    "rope.phi_min": "rope_phi_min",
    "rope.base": "rope_base",
    "mask.session_mask": "session_mask",
    "mask.delta_delay_ms": "delta_delay_ms",
    "mask.strict_pairing": "strict_pairing",
    "heads.bucket_boundaries": "bucket_boundaries",
    "heads.context_conditioned": "context_heads",
    "heads.aux_tasks": "aux_tasks",
    "attention.tile_size": "tile_size",
    "attention.engine": "engine",
    "attention.gating": "gating",
}
_TRAIN_KEYS = {
    "batching.token_budget": "token_budget",
    "batching.chunk_length": "chunk_length",
    "train.lr": "lr",
    "train.warmup_steps": "warmup_steps",
    "train.epochs": "epochs",
    "train.grad_clip": "grad_clip",
    "train.final_lr_fraction": "final_lr_fraction",
}


@dataclass
class DataConfig:
    path: str | None = None
    n_impressions: int = 50_000
    position_bias: tuple[float, ...] = (2.0, 1.0)
    session_effect: float = 1.0
    recency_boost: float = 3.0
    span_days: float = 14.0
    holdout_ms: int = 86_400_000


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def values(self) -> dict[str, Any]:
        """Every schema key with its resolved value."""
        m, t, d = self.model, self.train, self.data
        out: dict[str, Any] = {"seed": self.seed}
        out.update({k: getattr(m, f) for k, f in _MODEL_KEYS.items()})
        out.update({k: getattr(t, f) for k, f in _TRAIN_KEYS.items()})
        out["heads.K"] = m.n_buckets
        out["heads.lambda_ctx"] = m.loss_weights.lambda_ctx
        out["heads.lambda_aux"] = m.loss_weights.lambda_aux
        out["heads.lambda_pair"] = m.loss_weights.lambda_pair
        for name in ("path", "n_impressions", "position_bias", "session_effect", "recency_boost", "span_days", "holdout_ms"):
            out[f"data.{name}"] = getattr(d, name)
        return out

    def to_text(self) -> str:
        lines = ["# resolved configuration"]
        for key, value in sorted(self.values().items()):
            lines.append(f"{key} = {format_value(value)}")
        return "\n".join(lines) + "\n"


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def load_file(path: str | Path) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_text(text, str(p))


def resolve(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """File, then overrides, then ``CADET_SEED``; every value is validated."""
    raw: dict[str, Any] = load_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        raw[key] = value
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        raw["seed"] = env[SEED_ENV]
    values: dict[str, Any] = {}
    for key, value in raw.items():
        try:
            values[key] = SCHEMA[key](value) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    try:
        return _build(values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _build(values: dict[str, Any]) -> RunConfig:
    seed = int(values.get("seed", 0))
    model_kw = {f: values[k] for k, f in _MODEL_KEYS.items() if k in values}
    if "heads.aux_tasks" in values:
        unknown = set(values["heads.aux_tasks"]) - set(AUX_TASKS)
        if unknown:
            raise ValueError(f"heads.aux_tasks: unknown task(s) {sorted(unknown)}")
    aux_tasks = model_kw.get("aux_tasks", ModelConfig.aux_tasks)
    default_weights = LossWeights(lambda_aux=(0.1,) * len(aux_tasks)) if aux_tasks else None
    lw = {
        "lambda_ctx": values.get("heads.lambda_ctx", 1.0),
        "lambda_aux": values.get("heads.lambda_aux", default_weights.lambda_aux if default_weights else ()),
        "lambda_pair": values.get("heads.lambda_pair", 0.1),
    }
    model_kw["loss_weights"] = LossWeights(**lw)
    model_kw["seed"] = seed
    model = ModelConfig(**model_kw)
    if "heads.K" in values and values["heads.K"] != model.n_buckets:
        raise ValueError(
            f"heads.K={values['heads.K']} disagrees with heads.bucket_boundaries "
            f"{model.bucket_boundaries} (which give K={model.n_buckets})"
        )
    train = TrainConfig(seed=seed, **{f: values[k] for k, f in _TRAIN_KEYS.items() if k in values})
    if train.token_budget < 2 or train.chunk_length < 2:
        raise ValueError("batching.token_budget and batching.chunk_length must be >= 2")
    if train.epochs < 0 or train.lr < 0:
        raise ValueError("train.epochs and train.lr must be non-negative")
    data_kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("data.")}
    data = DataConfig(**data_kw)
    if len(data.position_bias) != model.n_buckets:
        raise ValueError(f"data.position_bias needs {model.n_buckets} entries, one per context bucket")
    return RunConfig(model, train, data, seed)

