"""Hypothesis strategies for packed token buffers."""

import numpy as np
from hypothesis import strategies as st

from cadet.events import TokenKind
from cadet.masking import MaskSpec, Mode

S, I, A, P = (int(k) for k in (TokenKind.STATIC, TokenKind.IMPRESSION, TokenKind.ACTION, TokenKind.PAD))
HOUR = 3_600_000
GAPS = [0, 1, 1000, HOUR - 1, HOUR, HOUR + 1, 3 * HOUR]


@st.composite
def sequence(draw, max_tokens):
    """Column lists for one user: static prefix, I/A events, candidate tail."""
    n_static = draw(st.integers(0, 2))
    kinds, ts, cand, ev = [S] * n_static, [0] * n_static, [False] * n_static, [False] * n_static
    t = 10 * HOUR
    while len(kinds) < max_tokens and draw(st.booleans()):
        t += draw(st.sampled_from(GAPS))
        kinds.append(I)
        ts.append(t)
        cand.append(False)
        ev.append(draw(st.booleans()) and draw(st.booleans()))
        if len(kinds) < max_tokens and draw(st.booleans()):
            kinds.append(A)
            ts.append(t)
            cand.append(False)
            ev.append(False)
    n_cand = draw(st.integers(0, min(3, max_tokens - len(kinds))))
    for _ in range(n_cand):
        t += draw(st.sampled_from(GAPS))
        kinds.append(I)
        ts.append(t)
        cand.append(True)
        ev.append(False)
    if not kinds:
        kinds, ts, cand, ev = [I], [t], [False], [False]
    return kinds, ts, cand, ev


@st.composite
def packed_spec(draw, max_tokens=64, mode=Mode.TRAINING):
    cols = {"kinds": [], "ts": [], "cand": [], "eval": [], "seg": []}
    s = 0
    while len(cols["kinds"]) < max_tokens and (s == 0 or draw(st.booleans())):
        kinds, ts, cand, ev = draw(sequence(max_tokens - len(cols["kinds"])))
        for name, vals in zip(("kinds", "ts", "cand", "eval"), (kinds, ts, cand, ev)):
            cols[name] += vals
        cols["seg"] += [s] * len(kinds)
        s += 1
    n_pad = draw(st.integers(0, max_tokens - len(cols["kinds"])))
    cols["kinds"] += [P] * n_pad
    cols["ts"] += [0] * n_pad
    cols["cand"] += [False] * n_pad
    cols["eval"] += [False] * n_pad
    cols["seg"] += [-1] * n_pad
    return MaskSpec(
        mode,
        np.array(cols["ts"], np.int64),
        np.array(cols["kinds"], np.int8),
        np.array(cols["seg"], np.int64),
        np.array(cols["cand"], bool),
        draw(st.sampled_from([0, HOUR])),
        draw(st.sampled_from([None, 0, HOUR])),
        draw(st.booleans()),
        np.array(cols["eval"], bool),
    )
