"""Mixture of shared low-rank adapters with weight dropout.

A desk-scale numpy implementation of a parameter-efficient adaptation
mechanism: several low-rank experts per adapted weight matrix share one
general-feature matrix, a learned gate routes each token to a sparse
subset of experts, and dropout on the shared matrix discourages it from
memorizing expert-specific features. The package includes the adapter
math, the router with its load-balance loss, a tiny frozen transformer
backbone to host the adapters, synthetic sequence tasks, a trainer, and
parameter accounting, all verified against finite differences and
closed-form oracles.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, MissingArtifactError,
                     NumericsError)
from .rng import Rng, gaussian_matrix
from .tape import Tape, Tensor, constant, parameter

__all__ = [
    "__version__",
    "ConfigError", "DataError", "MissingArtifactError", "NumericsError",
    "Rng", "gaussian_matrix",
    "Tape", "Tensor", "constant", "parameter",
]
