"""Fact-based visual question answering."""

from ._kbqa import (
    Config,
    DataError,
    LoadError,
    __version__,
    answer,
    convert_fvqa,
    evaluate,
    hinge_loss,
    kb_stats,
    score,
    synth,
    train,
)

__all__ = [
    "Config",
    "DataError",
    "LoadError",
    "__version__",
    "answer",
    "convert_fvqa",
    "evaluate",
    "hinge_loss",
    "kb_stats",
    "score",
    "synth",
    "train",
]
