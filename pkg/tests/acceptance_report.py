"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

import contextlib
import time

LINES: list[str] = []


@contextlib.contextmanager
def criterion(number: int, title: str):
    notes: dict = {}
    t0 = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        detail = ", ".join(f"{k}={v}" for k, v in notes.items())
        LINES.append(f"[FAIL] {number:>2}. {title} ({detail}; {type(exc).__name__}: {exc})".replace("\n", " "))
        raise
    notes["seconds"] = f"{time.perf_counter() - t0:.1f}"
    LINES.append(f"[PASS] {number:>2}. {title} ({', '.join(f'{k}={v}' for k, v in notes.items())})")
