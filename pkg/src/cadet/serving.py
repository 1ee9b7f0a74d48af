"""Producer/consumer inference service simulator.

A pool of preprocessing workers feeds a bounded task queue that a single
inference consumer drains. Two clocks are offered: a deterministic
discrete-event simulation on virtual time, and a threaded wall-clock run
where the consumer really executes (or sleeps for) each request's cost.
"""

from __future__ import annotations

import heapq
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

CLOCKS = ("virtual", "wall")


@dataclass(frozen=True)
class ServiceConfig:
    n_preprocess_workers: int = 4
    queue_capacity: int = 16
    arrival_rate_rps: float | None = None  # None = saturated (workers never wait for work)
    n_requests: int = 10_000
    context_tokens: tuple[int, int] = (256, 256)  # inclusive uniform range for L
    candidates: tuple[int, int] = (64, 64)  # inclusive uniform range for N
    preprocess_ms_per_token: float = 0.0
    latency_budget_ms: float = 50.0
    seed: int = 0
    clock: str = "virtual"

    def __post_init__(self) -> None:
        if self.n_preprocess_workers < 1:
            raise ValueError("need at least one preprocessing worker")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.n_requests < 1:
            raise ValueError("n_requests must be >= 1")
        if self.arrival_rate_rps is not None and self.arrival_rate_rps <= 0:
            raise ValueError("arrival_rate_rps must be positive")
        if self.preprocess_ms_per_token < 0:
            raise ValueError("preprocess_ms_per_token must be >= 0")
        for lo, hi in (self.context_tokens, self.candidates):
            if lo < 0 or hi < lo:
                raise ValueError("size ranges must satisfy 0 <= lo <= hi")
        if self.clock not in CLOCKS:
            raise ValueError(f"clock must be one of {CLOCKS}")

    @property
    def saturated(self) -> bool:
        return self.arrival_rate_rps is None


class InferenceCost(Protocol):
    def __call__(self, context_tokens: int, candidates: int) -> float: ...


@dataclass
class ConstantCost:
    """Fixed per-request consumer time ``l`` in milliseconds."""

    l_ms: float

    def __call__(self, context_tokens: int, candidates: int) -> float:
        return self.l_ms

    def execute(self, context_tokens: int, candidates: int) -> None:
        time.sleep(self.l_ms / 1000.0)


class ModelCost:
    """Consumer cost measured on a real forward pass with the serving mask.

    ``__call__`` returns the median of ``repeats`` timed runs (cached per
    request size); ``execute`` runs the forward once for wall-clock mode.
    """

    def __init__(self, params, config, repeats: int = 3, seed: int = 0):
        self.params = params
        self.config = config
        self.repeats = repeats
        self.seed = seed
        self._inputs: dict[tuple[int, int], dict] = {}
        self._cache: dict[tuple[int, int], float] = {}

    def _tokens(self, L: int, N: int) -> dict[str, np.ndarray]:
        key = (L, N)
        if key not in self._inputs:
            self._inputs[key] = synthetic_request(L, N, self.config, self.seed)
        return self._inputs[key]

    def execute(self, context_tokens: int, candidates: int) -> None:
        from .model import forward, inference_spec

        tokens = self._tokens(context_tokens, candidates)
        rows = np.flatnonzero(tokens["cand"])
        forward(tokens, self.params, self.config, rows=rows, spec=inference_spec(tokens))

    def __call__(self, context_tokens: int, candidates: int) -> float:
        key = (context_tokens, candidates)
        if key not in self._cache:
            times = []
            for _ in range(self.repeats):
                t0 = time.perf_counter()
                self.execute(context_tokens, candidates)
                times.append((time.perf_counter() - t0) * 1000.0)
            self._cache[key] = float(np.median(times))
        return self._cache[key]


def synthetic_request(L: int, N: int, config, seed: int = 0) -> dict[str, np.ndarray]:
    """Token columns for one scoring request: ``L`` alternating impression and
    action context tokens followed by ``N`` candidate impressions."""
    from .events import TokenKind

    rng = np.random.default_rng([seed, L, N])
    T = L + N
    kind = np.where(np.arange(T) % 2 == 0, TokenKind.IMPRESSION, TokenKind.ACTION).astype(np.int8)
    kind[L:] = TokenKind.IMPRESSION
    if L % 2 == 1 and L > 0:
        kind[L - 1] = TokenKind.IMPRESSION
    ts = np.cumsum(rng.integers(1_000, 600_000, size=T)).astype(np.int64) + 1_700_000_000_000
    ts[L:] = ts[L - 1] + 1 if L else ts[0]
    cand = np.zeros(T, bool)
    cand[L:] = True
    return {
        "kind": kind,
        "ts": ts,
        "ad": rng.integers(0, config.ad_vocab, size=T),
        "req": rng.integers(0, config.feature_vocab, size=(T, config.n_request_features)),
        "static": np.zeros(T, np.int64),
        "click": rng.integers(0, 2, size=T),
        "bucket": np.where(kind == TokenKind.ACTION, 1 + rng.integers(0, config.n_buckets, size=T), 0),
        "label": np.full(T, -1, np.int64),
        "aux": np.zeros((T, 2)),
        "cand": cand,
        "eval": np.zeros(T, bool),
    }


@dataclass
class ServiceReport:
    throughput_rps: float
    latency_p50_ms: float
    latency_p99_ms: float
    mean_latency_ms: float
    mean_queue_length: float
    max_queue_length: int
    mean_queue_wait_ms: float
    queue_arrival_rate_rps: float
    blocked_puts: int
    producer_blocked_ms: float
    consumer_utilization: float
    n_requests: int
    duration_ms: float
    within_budget: float  # fraction of requests under the latency budget
    clock: str = "virtual"

    @property
    def littles_law_error(self) -> float:
        """Relative gap between mean queue length and arrival rate x mean wait."""
        rhs = self.queue_arrival_rate_rps * self.mean_queue_wait_ms / 1000.0
        denom = max(self.mean_queue_length, rhs)
        return 0.0 if denom == 0 else abs(self.mean_queue_length - rhs) / denom

    def rows(self) -> list[tuple[str, str]]:
        keys = (
            "throughput_rps", "latency_p50_ms", "latency_p99_ms", "mean_latency_ms", "mean_queue_length",
            "max_queue_length", "mean_queue_wait_ms", "queue_arrival_rate_rps", "blocked_puts",
            "producer_blocked_ms", "consumer_utilization", "n_requests", "duration_ms", "within_budget", "clock",
        )
        out = [(k, _fmt(getattr(self, k))) for k in keys]
        out.append(("littles_law_error", _fmt(self.littles_law_error)))
        return out


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


@dataclass
class _Request:
    rid: int
    L: int
    N: int
    arrival: float
    enqueued: float = 0.0
    dequeued: float = 0.0
    done: float = 0.0


def _sizes(config: ServiceConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([config.seed, 3])
    L = rng.integers(config.context_tokens[0], config.context_tokens[1] + 1, size=config.n_requests)
    N = rng.integers(config.candidates[0], config.candidates[1] + 1, size=config.n_requests)
    return L, N


def _arrivals(config: ServiceConfig) -> np.ndarray | None:
    if config.saturated:
        return None
    rng = np.random.default_rng([config.seed, 4])
    return np.cumsum(rng.exponential(1000.0 / config.arrival_rate_rps, size=config.n_requests))


def run_sim(config: ServiceConfig, inference_cost_fn: Callable[[int, int], float]) -> ServiceReport:
    if config.clock == "virtual":
        return _run_virtual(config, inference_cost_fn)
    return _run_wall(config, inference_cost_fn)


# ---------------------------------------------------------------------------
# virtual clock
# ---------------------------------------------------------------------------


class _QueueStats:
    """Time-weighted occupancy of the bounded queue."""

    def __init__(self) -> None:
        self.length = 0
        self.max_length = 0
        self.area = 0.0
        self.last = 0.0
        self.puts = 0
        self.first_put: float | None = None
        self.lock = threading.Lock()

    def change(self, now: float, delta: int) -> None:
        with self.lock:
            now = max(now, self.last)
            self.area += self.length * (now - self.last)
            self.last = now
            self.length += delta
            self.max_length = max(self.max_length, self.length)
            if delta > 0:
                self.puts += 1
                if self.first_put is None:
                    self.first_put = now


def _run_virtual(config: ServiceConfig, cost_fn) -> ServiceReport:
    Ls, Ns = _sizes(config)
    arrivals = _arrivals(config)
    events: list = []
    seq = 0

    def schedule(t, kind, payload):
        nonlocal seq
        heapq.heappush(events, (t, seq, kind, payload))
        seq += 1

    incoming: deque[_Request] = deque()
    idle_workers: deque[int] = deque(range(config.n_preprocess_workers))
    task_queue: deque[_Request] = deque()
    blocked: deque[tuple[int, _Request, float]] = deque()
    qstats = _QueueStats()
    done: list[_Request] = []
    issued = 0
    consumer_busy = False
    busy_ms = 0.0
    blocked_ms = 0.0
    blocked_puts = 0

    def preprocess_ms(r: _Request) -> float:
        return config.preprocess_ms_per_token * (r.L + r.N)

    def next_request(now: float) -> _Request | None:
        nonlocal issued
        if config.saturated:
            if issued >= config.n_requests:
                return None
            r = _Request(issued, int(Ls[issued]), int(Ns[issued]), now)
            issued += 1
            return r
        return incoming.popleft() if incoming else None

    def dispatch_workers(now: float) -> None:
        while idle_workers:
            r = next_request(now)
            if r is None:
                return
            w = idle_workers.popleft()
            schedule(now + preprocess_ms(r), "pre_done", (w, r))

    def enqueue(r: _Request, now: float) -> None:
        r.enqueued = now
        task_queue.append(r)
        qstats.change(now, +1)

    def start_consumer(now: float) -> None:
        nonlocal consumer_busy, busy_ms
        if consumer_busy or not task_queue:
            return
        r = task_queue.popleft()
        qstats.change(now, -1)
        r.dequeued = now
        consumer_busy = True
        cost = float(cost_fn(r.L, r.N))
        busy_ms += cost
        schedule(now + cost, "inf_done", r)

    if arrivals is not None:
        for i, t in enumerate(arrivals):
            schedule(float(t), "arrival", _Request(i, int(Ls[i]), int(Ns[i]), float(t)))
    dispatch_workers(0.0)

    now = 0.0
    while events:
        now, _, kind, payload = heapq.heappop(events)
        if kind == "arrival":
            incoming.append(payload)
            dispatch_workers(now)
        elif kind == "pre_done":
            w, r = payload
            if len(task_queue) < config.queue_capacity:
                enqueue(r, now)
                idle_workers.append(w)
                dispatch_workers(now)
            else:
                blocked_puts += 1
                blocked.append((w, r, now))
            start_consumer(now)
        else:  # inference finished
            payload.done = now
            done.append(payload)
            consumer_busy = False
            start_consumer(now)
            while blocked and len(task_queue) < config.queue_capacity:
                w, r, since = blocked.popleft()
                blocked_ms += now - since
                enqueue(r, now)
                idle_workers.append(w)
            dispatch_workers(now)
            start_consumer(now)
    qstats.change(now, 0)
    return _report(config, done, qstats, busy_ms, blocked_puts, blocked_ms, now, "virtual")


# ---------------------------------------------------------------------------
# wall clock
# ---------------------------------------------------------------------------


_STOP = object()


class _InstrumentedQueue(queue.Queue):
    """Bounded queue whose occupancy is recorded under the queue's own mutex,
    so enqueue/dequeue timestamps are consistent with the stored order."""

    def __init__(self, maxsize: int, stats: _QueueStats, clock: Callable[[], float]):
        super().__init__(maxsize)
        self.stats = stats
        self.clock = clock

    def _put(self, item) -> None:
        super()._put(item)
        if item is not _STOP:
            item.enqueued = self.clock()
            self.stats.change(item.enqueued, +1)

    def _get(self):
        item = super()._get()
        if item is not _STOP:
            item.dequeued = self.clock()
            self.stats.change(item.dequeued, -1)
        return item


def _run_wall(config: ServiceConfig, cost_fn) -> ServiceReport:
    Ls, Ns = _sizes(config)
    arrivals = _arrivals(config)
    t0 = time.perf_counter()

    def now_ms() -> float:
        return (time.perf_counter() - t0) * 1000.0

    qstats = _QueueStats()
    tasks = _InstrumentedQueue(config.queue_capacity, qstats, now_ms)
    completions: queue.SimpleQueue = queue.SimpleQueue()
    counter_lock = threading.Lock()
    counter = [0]
    blocked = {"puts": 0, "ms": 0.0}
    execute = getattr(cost_fn, "execute", None)

    def worker() -> None:
        while True:
            with counter_lock:
                i = counter[0]
                if i >= config.n_requests:
                    return
                counter[0] += 1
            if arrivals is not None:
                wait = arrivals[i] - now_ms()
                if wait > 0:
                    time.sleep(wait / 1000.0)
                arrival = float(arrivals[i])
            else:
                arrival = now_ms()
            r = _Request(i, int(Ls[i]), int(Ns[i]), arrival)
            pre = config.preprocess_ms_per_token * (r.L + r.N)
            if pre > 0:
                time.sleep(pre / 1000.0)
            try:
                tasks.put(r, block=False)
            except queue.Full:
                start = now_ms()
                tasks.put(r)
                with counter_lock:
                    blocked["puts"] += 1
                    blocked["ms"] += now_ms() - start

    busy = [0.0]

    def consumer() -> None:
        while True:
            r = tasks.get()
            if r is _STOP:
                return
            a = time.perf_counter()
            if execute is not None:
                execute(r.L, r.N)
            else:
                time.sleep(float(cost_fn(r.L, r.N)) / 1000.0)
            busy[0] += (time.perf_counter() - a) * 1000.0
            r.done = now_ms()
            completions.put(r)

    workers = [threading.Thread(target=worker, daemon=True) for _ in range(config.n_preprocess_workers)]
    cons = threading.Thread(target=consumer, daemon=True)
    cons.start()
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    tasks.put(_STOP)
    cons.join()
    end = now_ms()
    qstats.change(end, 0)
    done = []
    while not completions.empty():
        done.append(completions.get())
    done.sort(key=lambda r: r.done)
    return _report(config, done, qstats, busy[0], blocked["puts"], blocked["ms"], end, "wall")


def _report(config, done, qstats: _QueueStats, busy_ms, blocked_puts, blocked_ms, end, clock) -> ServiceReport:
    lat = np.array([r.done - r.arrival for r in done])
    waits = np.array([r.dequeued - r.enqueued for r in done])
    finish = np.array(sorted(r.done for r in done))
    n = len(done)
    span = finish[-1] - finish[0] if n > 1 else 0.0
    throughput = (n - 1) / span * 1000.0 if span > 0 else 0.0
    window = end - (qstats.first_put or 0.0)
    return ServiceReport(
        throughput_rps=float(throughput),
        latency_p50_ms=float(np.percentile(lat, 50)),
        latency_p99_ms=float(np.percentile(lat, 99)),
        mean_latency_ms=float(lat.mean()),
        mean_queue_length=float(qstats.area / window) if window > 0 else 0.0,
        max_queue_length=int(qstats.max_length),
        mean_queue_wait_ms=float(waits.mean()),
        queue_arrival_rate_rps=float(qstats.puts / window * 1000.0) if window > 0 else 0.0,
        blocked_puts=int(blocked_puts),
        producer_blocked_ms=float(blocked_ms),
        consumer_utilization=float(busy_ms / end) if end > 0 else 0.0,
        n_requests=n,
        duration_ms=float(end),
        within_budget=float(np.mean(lat <= config.latency_budget_ms)),
        clock=clock,
    )
