"""Gated unified-attention network over a concatenated text/visual sequence.

The package is layered bottom-up:

- :mod:`muan.tensor` - float64 arrays with reverse-mode autodiff,
- :mod:`muan.optim` - Adam,
- :mod:`muan.attention` - gated multi-head attention over the joint sequence,
- :mod:`muan.network` - unified-attention blocks and the stacked model trunk,
- :mod:`muan.heads` - answer / grounding heads, losses and metrics,
- :mod:`muan.encoders` / :mod:`muan.data` - toy scenes, questions, encoders,
- :mod:`muan.checkpoint`, :mod:`muan.train`, :mod:`muan.cli` - persistence,
  the training loop and the command line.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DatasetError,
    DegenerateRowError,
    DimensionError,
    LabelError,
    MuanError,
    RunLockError,
    TrainingDivergenceError,
    VocabularyError,
)
from .tensor import MASK_DROP, RngStream, Tensor, backward, finite_diff_grad, no_grad

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "ContractError",
    "DatasetError",
    "DegenerateRowError",
    "DimensionError",
    "LabelError",
    "MuanError",
    "RunLockError",
    "TrainingDivergenceError",
    "VocabularyError",
    "MASK_DROP",
    "RngStream",
    "Tensor",
    "backward",
    "finite_diff_grad",
    "no_grad",
    "__version__",
]
