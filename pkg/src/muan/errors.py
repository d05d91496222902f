"""Exception types shared across the package.

Every error raised on purpose derives from :class:`MuanError`, so callers
(and the CLI exit-code mapping) can distinguish deliberate rejections from
genuine bugs.
"""

from __future__ import annotations


class MuanError(Exception):
    """Base class for all deliberate failures."""


class DimensionError(MuanError):
    """Operand shapes are incompatible; the message names both shapes."""


class DegenerateRowError(MuanError):
    """A softmax row had every entry masked out."""


class ContractError(MuanError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class ConfigurationError(MuanError):
    """A config value or combination of values is invalid."""


class TrainingDivergenceError(MuanError):
    """A non-finite loss or gradient was produced during optimisation."""


class VocabularyError(MuanError):
    """A word id falls outside the vocabulary."""


class LabelError(MuanError):
    """A supervision target violates its encoding (e.g. not one-hot)."""


class DatasetError(MuanError):
    """A dataset file is malformed; the message carries the line number."""


class CheckpointError(MuanError):
    """A checkpoint file is malformed or does not match the model."""


class RunLockError(MuanError):
    """Another training process already owns the run directory."""
