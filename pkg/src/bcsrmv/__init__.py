"""Matrix-free FE operators on sparse block-compressed multivectors."""

from . import bcsr, bench, blocks, comm, energy, hilbert, localization, matfree, mesh, shapes
from .errors import (
    ConfigurationError,
    ConsistencyError,
    DeadlockError,
    DomainError,
    Error,
    PatternError,
    ProtocolError,
    RankFailure,
    ShapeError,
    StateError,
    UsageError,
)

__all__ = [
    "bcsr",
    "bench",
    "blocks",
    "comm",
    "energy",
    "hilbert",
    "localization",
    "matfree",
    "mesh",
    "shapes",
    "Error",
    "ConfigurationError",
    "ConsistencyError",
    "DeadlockError",
    "DomainError",
    "PatternError",
    "ProtocolError",
    "RankFailure",
    "ShapeError",
    "StateError",
    "UsageError",
]

__version__ = "0.1.0"
