"""Probabilistic task modelling: Gaussian task-themes over VAE embeddings.

Tasks are treated as documents and their data points as words. Each task is a
mixture of K shared Gaussian task-themes in an embedding space, and its
Dirichlet posterior over theme proportions serves as the task representation.
"""

from taskmodel.errors import (
    CheckpointError,
    ConfigError,
    DegeneracyError,
    DomainError,
    ParseError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DegeneracyError",
    "DomainError",
    "ParseError",
    "UsageError",
    "__version__",
]
