"""Sparse-attention mixture-of-experts sequence diffusion, desk scale.

A small numpy-only stack: a tape-based autodiff tensor, windowed/dilated
sparse attention with global tokens, top-k expert routing, an embedding-space
diffusion process with a soft absorbing state, a deterministic reverse
sampler, toy seq2seq data, text metrics, and a training CLI.
"""

from .errors import (
    BatchError,
    CheckpointError,
    ConfigError,
    CorpusError,
    DegenerateRowError,
    EvalError,
    MoeDiffError,
    NumericError,
    OrderingError,
    ShapeError,
    VocabularyError,
)
from .tensor import GradTape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "GradTape",
    "Tensor",
    "backward",
    "MoeDiffError",
    "ShapeError",
    "DegenerateRowError",
    "VocabularyError",
    "ConfigError",
    "OrderingError",
    "BatchError",
    "CorpusError",
    "CheckpointError",
    "EvalError",
    "NumericError",
    "__version__",
]
