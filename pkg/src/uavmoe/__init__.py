"""Measures of effectiveness for signalised approaches from drone trajectories."""

from .errors import (
    ConfigError,
    ConsistencyError,
    DataError,
    DomainError,
    GeometryError,
    InsufficientDataError,
    ParseError,
    UavMoeError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConsistencyError",
    "DataError",
    "DomainError",
    "GeometryError",
    "InsufficientDataError",
    "ParseError",
    "UavMoeError",
    "ValidationError",
]
