"""Exception types shared across the package."""


class MoeDiffError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MoeDiffError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateRowError(MoeDiffError):
    """A softmax row has no unmasked entries, so it has no valid distribution."""


class VocabularyError(MoeDiffError):
    """A token id falls outside the model vocabulary."""


class ConfigError(MoeDiffError):
    """A configuration value (or combination of values) is invalid."""


class OrderingError(MoeDiffError):
    """Reverse-process step indices were passed out of order."""


class BatchError(MoeDiffError):
    """A batch is structurally unusable (e.g. a pair with no target positions)."""


class CorpusError(MoeDiffError):
    """A corpus file cannot be read or violates the line format."""


class CheckpointError(MoeDiffError):
    """A checkpoint file is malformed or incompatible."""


class EvalError(MoeDiffError):
    """Evaluation inputs are unusable (e.g. an empty corpus)."""


class NumericError(MoeDiffError):
    """A numeric failure such as a NaN loss during training."""
