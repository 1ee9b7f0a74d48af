"""Picks the tiled-attention backend at import time.

The compiled core is used when it imports; ``CADET_PURE_PYTHON=1`` forces
the numpy fallback.
"""

from __future__ import annotations

import os

from . import _tiled_py

python_forward = _tiled_py.tiled_forward
python_backward = _tiled_py.tiled_backward

try:
    if os.environ.get("CADET_PURE_PYTHON") == "1":
        raise ImportError("pure-python backend forced")
    from ._tiled_c import tiled_backward as compiled_backward
    from ._tiled_c import tiled_forward as compiled_forward
except ImportError:
    compiled_forward = compiled_backward = None

HAVE_COMPILED = compiled_forward is not None
BACKEND = "compiled" if HAVE_COMPILED else "python"


def get_backend(name: str | None = None):
    """Return ``(forward, backward)`` for ``"compiled"``, ``"python"`` or the default."""
    name = name or BACKEND
    if name == "python":
        return python_forward, python_backward
    if name == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError("compiled attention core is not built; reinstall with Cython available")
        return compiled_forward, compiled_backward
    raise ValueError(f"unknown attention backend {name!r}")
