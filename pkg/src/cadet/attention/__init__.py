"""Self-gated attention: reference and tiled engines, compiled or numpy."""

from .kernels import BACKEND, HAVE_COMPILED, get_backend
from .layer import (
    ENGINES,
    GATINGS,
    WEIGHT_NAMES,
    OpCount,
    TileConfig,
    TiledResult,
    init_attention_params,
    interaction_gate,
    mha_backward,
    mha_forward,
    op_count,
    reference_attend,
    representation_gate,
    self_gate,
    tile_stats,
    tiled_attend,
)

__all__ = [
    "BACKEND", "HAVE_COMPILED", "get_backend", "ENGINES", "GATINGS", "WEIGHT_NAMES", "OpCount",
    "TileConfig", "TiledResult", "init_attention_params", "interaction_gate", "mha_backward",
    "mha_forward", "op_count", "reference_attend", "representation_gate", "self_gate",
    "tile_stats", "tiled_attend",
]
