"""Context-aware decoder-only transformer for CTR prediction, at desk scale."""

from .batching import PackedBatch, chunk, pack
from .events import GeneratorConfig, UserHistory, generate, interleave, read_log, write_log
from .heads import LossWeights, PredictionSet
from .masking import MaskSpec, count_allowed
from .model import ModelConfig, forward, init_params
from .trainer import EvalReport, TrainConfig, auc, run_experiment

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "GeneratorConfig",
    "LossWeights",
    "MaskSpec",
    "ModelConfig",
    "PackedBatch",
    "PredictionSet",
    "TrainConfig",
    "UserHistory",
    "auc",
    "chunk",
    "count_allowed",
    "forward",
    "generate",
    "init_params",
    "interleave",
    "pack",
    "read_log",
    "run_experiment",
    "write_log",
]
