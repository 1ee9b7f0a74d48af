"""Time dense reference attention against the tiled engine over a grid of shapes.

    python3 benchmarks/bench_attention.py [--repeats 3] [--tile 64]

Writes one TSV row per (L, N) with pair counts, skipped tiles and wall times.
"""

import argparse
import sys

from cadet.cli import BENCH_COLUMNS, bench_attention

GRID = [(256, 32), (512, 64), (1024, 128), (2048, 256)]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--tile", type=int, default=64)
    ap.add_argument("--heads", type=int, default=2)
    args = ap.parse_args(argv)
    print("\t".join(BENCH_COLUMNS))
    for L, N in GRID:
        row = bench_attention(L, N, tile=args.tile, heads=args.heads, repeats=args.repeats)
        print("\t".join(f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in BENCH_COLUMNS))
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
