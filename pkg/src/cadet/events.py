"""User event histories, interleaved token sequences, a synthetic
position-biased click generator, and the line-delimited event-log format."""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

SCHEMA_VERSION = 1
DAY_MS = 86_400_000
HOUR_MS = 3_600_000


class OrderingError(ValueError):
    """Events are not in non-decreasing timestamp order."""


class LogParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class TokenKind(IntEnum):
    STATIC = 0
    IMPRESSION = 1
    ACTION = 2
    PAD = 3


@dataclass(frozen=True)
class Impression:
    ad_id: int
    request_features: tuple[int, ...]
    timestamp_ms: int

    def __post_init__(self) -> None:
        if self.timestamp_ms <= 0:
            raise ValueError(f"timestamp_ms must be positive, got {self.timestamp_ms}")


@dataclass(frozen=True)
class ContextualizedAction:
    context_bucket: int
    raw_position: int
    action_label: int
    aux_labels: tuple[float, ...]
    timestamp_ms: int

    def __post_init__(self) -> None:
        if self.action_label not in (0, 1):
            raise ValueError(f"action_label must be 0 or 1, got {self.action_label}")
        if self.raw_position < 1:
            raise ValueError(f"raw_position must be >= 1, got {self.raw_position}")


Event = tuple[Impression, "ContextualizedAction | None"]


@dataclass
class UserHistory:
    user_id: int
    static_features: tuple[int, ...]
    events: list[Event] = field(default_factory=list)

    def validate(self, boundaries: Sequence[int] | None = None, lookback_ms: int | None = None) -> None:
        last = None
        for n, (imp, act) in enumerate(self.events):
            if last is not None and imp.timestamp_ms < last:
                raise OrderingError(f"user {self.user_id}: event {n} at {imp.timestamp_ms} precedes {last}")
            last = imp.timestamp_ms
            if act is None:
                if n != len(self.events) - 1:
                    raise ValueError(f"user {self.user_id}: only the final impression may be unlabeled")
                continue
            if act.timestamp_ms != imp.timestamp_ms:
                raise ValueError(f"user {self.user_id}: action {n} timestamp differs from its impression")
            if boundaries is not None and act.context_bucket != bucketize_position(act.raw_position, boundaries):
                raise ValueError(f"user {self.user_id}: bucket {act.context_bucket} inconsistent with position {act.raw_position}")
        if lookback_ms is not None and self.events:
            newest = self.events[-1][0].timestamp_ms
            if newest - self.events[0][0].timestamp_ms > lookback_ms:
                raise ValueError(f"user {self.user_id}: history exceeds lookback window")

    @property
    def n_impressions(self) -> int:
        return len(self.events)


class Token(NamedTuple):
    kind: TokenKind
    timestamp_ms: int
    session_id: int
    # STATIC: (slot, value); IMPRESSION: (ad_id, *request_features); ACTION: (click, bucket)
    payload: tuple[int, ...]


@dataclass
class InterleavedSequence:
    user_id: int
    tokens: list[Token]
    impression_index: dict[int, int]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def kinds(self) -> list[TokenKind]:
        return [t.kind for t in self.tokens]

    @property
    def timestamps(self) -> list[int]:
        return [t.timestamp_ms for t in self.tokens]

    @property
    def session_ids(self) -> list[int]:
        return [t.session_id for t in self.tokens]


def bucketize_position(raw_position: int, boundaries: Sequence[int]) -> int:
    """1-based context bucket: one plus the number of boundaries below ``raw_position``."""
    if raw_position < 1:
        raise ValueError(f"raw_position must be >= 1, got {raw_position}")
    return 1 + bisect.bisect_left(boundaries, raw_position)


def check_boundaries(boundaries: Sequence[int]) -> None:
    if not boundaries:
        raise ValueError("bucket boundaries must be non-empty")
    if any(b >= c for b, c in zip(boundaries, boundaries[1:])):
        raise ValueError(f"bucket boundaries must be strictly increasing: {list(boundaries)}")


def interleave(history: UserHistory, session_gap_ms: int = 30 * 60 * 1000) -> InterleavedSequence:
    """Lay a history out as ``[M; I_1, (C_1,A_1); ...; I_L]``.

    Session ids come from a time-gap threshold and are carried for analysis
    only; nothing downstream feeds them to the model.
    """
    events = history.events
    for n in range(1, len(events)):
        if events[n][0].timestamp_ms < events[n - 1][0].timestamp_ms:
            raise OrderingError(
                f"user {history.user_id}: event {n} at {events[n][0].timestamp_ms} "
                f"precedes {events[n - 1][0].timestamp_ms}"
            )
    t0 = events[0][0].timestamp_ms if events else 0
    tokens = [Token(TokenKind.STATIC, t0, -1, (slot, value)) for slot, value in enumerate(history.static_features)]
    impression_index: dict[int, int] = {}
    session = -1
    prev = None
    for n, (imp, act) in enumerate(events):
        if prev is None or imp.timestamp_ms - prev > session_gap_ms:
            session += 1
        prev = imp.timestamp_ms
        impression_index[len(tokens)] = n
        tokens.append(Token(TokenKind.IMPRESSION, imp.timestamp_ms, session, (imp.ad_id, *imp.request_features)))
        if act is not None:
            tokens.append(Token(TokenKind.ACTION, imp.timestamp_ms, session, (act.action_label, act.context_bucket)))
    return InterleavedSequence(history.user_id, tokens, impression_index)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    n_users: int = 1000
    seed: int = 0
    start_ms: int = 1_700_000_000_000
    span_days: float = 14.0
    sessions_per_day: float = 0.6
    impressions_per_session: float = 3.0
    within_session_gap_ms: float = 90_000.0
    n_ads: int = 400
    n_ad_clusters: int = 8
    base_ctr: tuple[float, ...] = (0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10, 0.11)
    boundaries: tuple[int, ...] = (4,)
    max_position: int = 8
    position_bias: tuple[float, ...] = (2.0, 1.0)
    n_devices: int = 3
    device_bias: tuple[float, ...] = (1.0, 1.0, 1.0)
    affinity_dim: int = 4
    affinity_scale: float = 0.8
    n_static_features: int = 2
    static_cardinality: int = 16
    # in-session label correlation: per-session lognormal CTR multiplier
    session_effect: float = 1.0
    # recency: multiplier when the user clicked in (t - window, t - min_age]
    recency_boost: float = 3.0
    recency_window_ms: int = DAY_MS
    recency_min_age_ms: int = HOUR_MS

    def validate(self) -> None:
        check_boundaries(self.boundaries)
        if len(self.position_bias) != len(self.boundaries) + 1:
            raise ValueError("position_bias needs one multiplier per context bucket")
        if any(m <= 0 for m in (*self.position_bias, *self.device_bias)) or self.recency_boost <= 0:
            raise ValueError("multipliers must be positive")
        if any(not 0.0 <= c <= 1.0 for c in self.base_ctr):
            raise ValueError("base_ctr entries must be probabilities")
        if len(self.base_ctr) != self.n_ad_clusters:
            raise ValueError("base_ctr needs one entry per ad cluster")
        if len(self.device_bias) != self.n_devices:
            raise ValueError("device_bias needs one entry per device")
        if self.n_users < 0 or self.n_ads < 1 or self.max_position < 1:
            raise ValueError("n_users >= 0, n_ads >= 1 and max_position >= 1 required")
        if self.session_effect < 0:
            raise ValueError("session_effect must be non-negative")


def _world(config: GeneratorConfig):
    rng = np.random.default_rng([config.seed, 0x5EED])
    ad_cluster = rng.integers(0, config.n_ad_clusters, size=config.n_ads)
    cluster_latent = rng.standard_normal((config.n_ad_clusters, config.affinity_dim))
    return ad_cluster, cluster_latent


def _user(config: GeneratorConfig, user_id: int, ad_cluster, cluster_latent) -> UserHistory:
    rng = np.random.default_rng([config.seed, 1, user_id])
    latent = rng.standard_normal(config.affinity_dim) / math.sqrt(config.affinity_dim)
    s = config.affinity_scale
    affinity = np.exp(s * cluster_latent @ latent - 0.5 * s * s * (cluster_latent**2).sum(1) / config.affinity_dim)
    # static features: favourite cluster (informative) plus noise slots
    static = [int(np.argmax(cluster_latent @ latent)) % config.static_cardinality]
    static += [int(v) for v in rng.integers(0, config.static_cardinality, size=config.n_static_features - 1)]
    static = static[: config.n_static_features]

    span_ms = config.span_days * DAY_MS
    n_sessions = rng.poisson(config.sessions_per_day * config.span_days)
    starts = np.sort(rng.uniform(0, span_ms, size=n_sessions)).astype(np.int64) + config.start_ms
    events: list[Event] = []
    recent_clicks: list[int] = []
    last_t = 0
    for start in starts:
        n_imp = 1 + rng.poisson(max(config.impressions_per_session - 1.0, 0.0))
        session_mult = math.exp(config.session_effect * rng.standard_normal() - 0.5 * config.session_effect**2)
        t = max(int(start), last_t + 1)
        for _ in range(n_imp):
            ad = int(rng.integers(0, config.n_ads))
            device = int(rng.integers(0, config.n_devices))
            pos = int(rng.integers(1, config.max_position + 1))
            bucket = bucketize_position(pos, config.boundaries)
            mult = 1.0
            if config.recency_boost != 1.0:
                lo, hi = t - config.recency_window_ms, t - config.recency_min_age_ms
                if any(lo < c <= hi for c in recent_clicks):
                    mult = config.recency_boost
            p = (
                config.base_ctr[ad_cluster[ad]]
                * affinity[ad_cluster[ad]]
                * config.position_bias[bucket - 1]
                * config.device_bias[device]
                * session_mult
                * mult
            )
            p = min(max(p, 0.0), 1.0)
            click = int(rng.random() < p)
            long_dwell = float(click and rng.random() < 0.6)
            duration = float(np.round(math.exp(0.7 + 0.3 * math.log(affinity[ad_cluster[ad]]) + 0.4 * rng.standard_normal()), 6))
            if click:
                recent_clicks.append(t)
            imp = Impression(ad, (device,), t)
            act = ContextualizedAction(bucket, pos, click, (long_dwell, duration), t)
            events.append((imp, act))
            last_t = t
            t += 1 + int(rng.exponential(config.within_session_gap_ms))
    return UserHistory(user_id, tuple(static), events)


def generate(config: GeneratorConfig) -> list[UserHistory]:
    """Deterministic synthetic histories; each user draws from its own
    ``(seed, user_id)`` stream so users can be produced in any order."""
    config.validate()
    ad_cluster, cluster_latent = _world(config)
    return [_user(config, uid, ad_cluster, cluster_latent) for uid in range(config.n_users)]


# ---------------------------------------------------------------------------
# event log
# ---------------------------------------------------------------------------


def _event_record(imp: Impression, act: ContextualizedAction | None) -> dict:
    return {
        "ad_id": imp.ad_id,
        "request_features": list(imp.request_features),
        "timestamp_ms": imp.timestamp_ms,
        "raw_position": None if act is None else act.raw_position,
        "click": None if act is None else act.action_label,
        "aux_labels": None if act is None else list(act.aux_labels),
    }


def write_log(path: str | Path, histories: Iterable[UserHistory], boundaries: Sequence[int] = (4,)) -> None:
    """One JSON header line then one line per user; no users gives an empty file."""
    histories = list(histories)
    with open(path, "w", encoding="utf-8") as fh:
        if not histories:
            return
        header = {"schema_version": SCHEMA_VERSION, "boundaries": list(boundaries)}
        fh.write(json.dumps(header) + "\n")
        for h in histories:
            rec = {
                "user_id": h.user_id,
                "static_features": list(h.static_features),
                "events": [_event_record(i, a) for i, a in h.events],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def _parse_user(rec: dict, boundaries: Sequence[int]) -> UserHistory:
    events: list[Event] = []
    for e in rec["events"]:
        imp = Impression(int(e["ad_id"]), tuple(int(v) for v in e["request_features"]), int(e["timestamp_ms"]))
        act = None
        if e["click"] is not None:
            pos = int(e["raw_position"])
            act = ContextualizedAction(
                bucketize_position(pos, boundaries),
                pos,
                int(e["click"]),
                tuple(float(v) for v in e["aux_labels"]),
                imp.timestamp_ms,
            )
        events.append((imp, act))
    h = UserHistory(int(rec["user_id"]), tuple(int(v) for v in rec["static_features"]), events)
    h.validate(boundaries)
    return h


def read_log(path: str | Path) -> list[UserHistory]:
    histories = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return histories
    try:
        header = json.loads(lines[0])
        version = header["schema_version"]
        boundaries = tuple(int(b) for b in header["boundaries"])
    except (ValueError, KeyError, TypeError) as exc:
        raise LogParseError(1, f"bad header: {exc}") from exc
    if version != SCHEMA_VERSION:
        raise LogParseError(1, f"unsupported schema_version {version}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            histories.append(_parse_user(json.loads(line), boundaries))
        except (ValueError, KeyError, TypeError) as exc:
            raise LogParseError(lineno, str(exc)) from exc
    return histories


def read_log_boundaries(path: str | Path) -> tuple[int, ...]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return tuple(json.loads(first)["boundaries"]) if first else (4,)
