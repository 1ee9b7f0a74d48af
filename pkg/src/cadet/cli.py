"""Command-line entry point.

Exit codes: 0 success, 1 validation/usage error, 2 runtime abort
(non-finite values, unreadable input).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from .events import GeneratorConfig, LogParseError, OrderingError, generate, read_log, read_log_boundaries, write_log
from .numerics import NonFiniteError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("cadet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); bad usage is a validation error here
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cadet", description="Context-aware decoder-only CTR transformer toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic event log")
    g.add_argument("--users", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--position-bias", type=_floats, default=(2.0, 1.0))
    g.add_argument("--boundaries", type=_ints, default=(4,))
    g.add_argument("--span-days", type=float, default=14.0)
    g.add_argument("--session-effect", type=float, default=1.0)
    g.add_argument("--recency-boost", type=float, default=3.0)

    t = sub.add_parser("train", help="train a model and evaluate it on the final-day slice")
    t.add_argument("--config")
    t.add_argument("--ablate", action="append", default=[], help="context|rope|mask|pairwise (repeatable or comma-separated)")
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="event log to train on (overrides data.path)")
    t.add_argument("--set", type=_kv, action="append", default=[], metavar="KEY=VALUE")

    e = sub.add_parser("eval", help="evaluate a checkpoint on an event log")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--token-budget", type=int, default=512)
    e.add_argument("--holdout-ms", type=int, default=86_400_000)
    e.add_argument("--out", help="also write the report here")

    gc = sub.add_parser("grad-check", help="finite-difference check of the full training loss")
    gc.add_argument("--precision", default="f64")
    gc.add_argument("--samples", type=int, default=200)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--epsilon", type=float, default=1e-5)
    gc.add_argument("--tolerance", type=float, default=1e-5)

    b = sub.add_parser("bench-attention", help="pair counts, tile skipping and engine timings")
    b.add_argument("--L", type=int, default=1024)
    b.add_argument("--N", type=int, default=128)
    b.add_argument("--tile", type=int, default=64)
    b.add_argument("--heads", type=int, default=1)
    b.add_argument("--head-dim", type=int, default=16)
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--no-timing", action="store_true", help="counts only")
    b.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("serve-sim", help="producer/consumer serving simulation")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--l-ms", type=float, help="constant per-request inference time")
    src.add_argument("--real-model", metavar="CHECKPOINT", help="time a real forward pass instead")
    s.add_argument("--workers", type=int, default=4)
    s.add_argument("--rate", type=float, default=None, help="arrival rate in rps; omitted = saturated")
    s.add_argument("--capacity", type=int, default=16)
    s.add_argument("--requests", type=int, default=10_000)
    s.add_argument("--L", type=int, default=256)
    s.add_argument("--N", type=int, default=64)
    s.add_argument("--preprocess-ms-per-token", type=float, default=0.0)
    s.add_argument("--budget-ms", type=float, default=50.0)
    s.add_argument("--clock", choices=("virtual", "wall"), default="virtual")
    s.add_argument("--seed", type=int, default=0)
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _print_tsv(rows, out=None, header: Sequence[str] | None = None) -> None:
    out = out or sys.stdout
    if header:
        print("\t".join(header), file=out)
    for row in rows:
        print("\t".join(str(v) for v in row), file=out)


def cmd_gen_data(args) -> int:
    cfg = GeneratorConfig(
        n_users=args.users,
        seed=args.seed,
        position_bias=args.position_bias,
        boundaries=args.boundaries,
        span_days=args.span_days,
        session_effect=args.session_effect,
        recency_boost=args.recency_boost,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise cfgmod.ConfigError(str(exc)) from exc
    histories = generate(cfg)
    write_log(args.out, histories, args.boundaries)
    n_imp = sum(len(h.events) for h in histories)
    _print_tsv([("users", len(histories)), ("impressions", n_imp), ("path", args.out)])
    return EXIT_OK


def _ablations(values: Sequence[str]) -> tuple[str, ...]:
    from .trainer import ABLATIONS

    out = []
    for v in values:
        for a in v.split(","):
            a = a.strip()
            if a not in ABLATIONS:
                raise cfgmod.ConfigError(f"unknown ablation {a!r}; choose from {'|'.join(ABLATIONS)}")
            out.append(a)
    return tuple(dict.fromkeys(out))


def load_histories(run: cfgmod.RunConfig):
    from .trainer import synthetic_histories

    d = run.data
    if d.path:
        boundaries = read_log_boundaries(d.path)
        if tuple(boundaries) != tuple(run.model.bucket_boundaries):
            raise cfgmod.ConfigError(
                f"log {d.path} was bucketed with boundaries {boundaries}, model expects {run.model.bucket_boundaries}"
            )
        return read_log(d.path)
    return synthetic_histories(
        d.n_impressions,
        seed=run.seed,
        position_bias=d.position_bias,
        boundaries=run.model.bucket_boundaries,
        session_effect=d.session_effect,
        recency_boost=d.recency_boost,
        span_days=d.span_days,
    )


def cmd_train(args) -> int:
    from .trainer import apply_ablations, build_dataset, evaluate, make_batches, save_checkpoint, train

    overrides = dict(args.set)
    if args.data:
        overrides["data.path"] = args.data
    run = cfgmod.resolve(args.config, overrides)
    # ablation flags are folded into the resolved config so the snapshot alone reproduces the run
    run.model = apply_ablations(run.model, _ablations(args.ablate))
    model_cfg = run.model
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.to_text(), encoding="utf-8")
    histories = load_histories(run)
    dataset = build_dataset(histories, model_cfg, run.train, run.data.holdout_ms)
    if not dataset.train:
        raise cfgmod.ConfigError("no training events before the hold-out cutoff")
    t0 = time.perf_counter()
    params, metrics, _ = train(dataset, model_cfg, run.train, metrics_path=out / "metrics.tsv")
    report = evaluate(make_batches(dataset.val, run.train.token_budget), params, model_cfg, len(metrics))
    _write_report(out / "eval.tsv", report)
    save_checkpoint(out / "checkpoint.npz", params, model_cfg)
    _print_tsv(report.rows() + [("train_seconds", f"{time.perf_counter() - t0:.1f}"), ("run_dir", str(out))])
    return EXIT_OK


def _write_report(path, report) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        _print_tsv(report.rows(), fh, header=("metric", "value"))


def cmd_eval(args) -> int:
    from .trainer import TrainConfig, build_dataset, evaluate, load_checkpoint, make_batches

    try:
        params, model_cfg = load_checkpoint(args.checkpoint)
    except (OSError, KeyError) as exc:
        raise cfgmod.ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    histories = read_log(args.data)
    tc = TrainConfig(token_budget=args.token_budget)
    dataset = build_dataset(histories, model_cfg, tc, args.holdout_ms)
    if not dataset.val:
        raise cfgmod.ConfigError("no events after the hold-out cutoff to evaluate")
    report = evaluate(make_batches(dataset.val, tc.token_budget), params, model_cfg)
    if args.out:
        _write_report(args.out, report)
    _print_tsv(report.rows())
    return EXIT_OK


def grad_check(precision: str = "f64", samples: int = 200, seed: int = 0, epsilon: float = 1e-5) -> float:
    """Finite-difference check of the full loss on a tiny model; returns the max relative error."""
    from .numerics import finite_diff_check
    from .trainer import gradcheck_problem, loss_and_grad, loss_only

    batch, params, config = gradcheck_problem(seed, precision)
    loss_and_grad(batch, params, config)
    return finite_diff_check(
        lambda: loss_only(batch, params, config),
        list(params.values()),
        epsilon=epsilon,
        n_samples=samples,
        rng=np.random.default_rng([seed, 99]),
    )


def cmd_grad_check(args) -> int:
    if args.precision != "f64":
        raise cfgmod.ConfigError("finite-difference checks need --precision f64")
    err = grad_check(args.precision, args.samples, args.seed, args.epsilon)
    ok = err < args.tolerance
    _print_tsv([("max_rel_err", f"{err:.3e}"), ("samples", args.samples), ("tolerance", args.tolerance), ("pass", ok)])
    return EXIT_OK if ok else EXIT_INVALID


BENCH_COLUMNS = (
    "L", "N", "dense_pairs", "sparse_pairs", "tiles_skipped",
    "wall_time_reference", "wall_time_tiled", "wall_time_tiled_python", "tiled_backend",
)


def bench_attention(L: int, N: int, tile: int = 64, heads: int = 1, head_dim: int = 16, repeats: int = 1,
                    timing: bool = True, seed: int = 0) -> dict:
    from .attention import BACKEND, HAVE_COMPILED, TileConfig, op_count, reference_attend, tile_stats, tiled_attend
    from .masking import MaskSpec, compile_rows

    spec = MaskSpec.inference(L, N)
    oc = op_count(spec)
    rows = compile_rows(spec)
    _, skipped = tile_stats(rows, tile)
    out = {"L": L, "N": N, "dense_pairs": oc.dense_pairs, "sparse_pairs": oc.sparse_pairs, "tiles_skipped": skipped,
           "wall_time_reference": math.nan, "wall_time_tiled": math.nan, "wall_time_tiled_python": math.nan,
           "tiled_backend": BACKEND}
    if not timing:
        return out
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((heads, L + N, head_dim)) for _ in range(3))

    def best(fn):
        times = []
        for _ in range(max(repeats, 1)):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    out["wall_time_reference"] = best(lambda: reference_attend(q, k, v, spec))
    out["wall_time_tiled"] = best(lambda: tiled_attend(q, k, v, rows, TileConfig(tile)))
    if HAVE_COMPILED:
        out["wall_time_tiled_python"] = best(lambda: tiled_attend(q, k, v, rows, TileConfig(tile, backend="python")))
    else:
        out["wall_time_tiled_python"] = out["wall_time_tiled"]
    return out


def cmd_bench(args) -> int:
    if min(args.L, args.N) < 0 or args.tile < 1:
        raise cfgmod.ConfigError("--L and --N must be >= 0 and --tile >= 1")
    r = bench_attention(args.L, args.N, args.tile, args.heads, args.head_dim, args.repeats, not args.no_timing, args.seed)
    fmt = lambda v: f"{v:.6f}" if isinstance(v, float) else str(v)  # noqa: E731
    _print_tsv([[fmt(r[c]) for c in BENCH_COLUMNS]], header=BENCH_COLUMNS)
    return EXIT_OK


def cmd_serve_sim(args) -> int:
    from .serving import ConstantCost, ModelCost, ServiceConfig, run_sim
    from .trainer import load_checkpoint

    try:
        sc = ServiceConfig(
            n_preprocess_workers=args.workers,
            queue_capacity=args.capacity,
            arrival_rate_rps=args.rate,
            n_requests=args.requests,
            context_tokens=(args.L, args.L),
            candidates=(args.N, args.N),
            preprocess_ms_per_token=args.preprocess_ms_per_token,
            latency_budget_ms=args.budget_ms,
            seed=args.seed,
            clock=args.clock,
        )
    except ValueError as exc:
        raise cfgmod.ConfigError(str(exc)) from exc
    if args.real_model:
        params, model_cfg = load_checkpoint(args.real_model)
        cost = ModelCost(params, model_cfg)
    else:
        cost = ConstantCost(10.0 if args.l_ms is None else args.l_ms)
        if cost.l_ms <= 0:
            raise cfgmod.ConfigError("--l-ms must be positive")
    report = run_sim(sc, cost)
    _print_tsv(report.rows())
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "bench-attention": cmd_bench,
    "serve-sim": cmd_serve_sim,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv or argv[0] not in COMMANDS and not argv[0].startswith("-"):
        if argv:
            print(f"cadet: unknown command {argv[0]!r}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except cfgmod.ConfigError as exc:
        print(f"cadet {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NonFiniteError, LogParseError, OrderingError, OSError, ValueError) as exc:
        print(f"cadet {args.command}: aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
