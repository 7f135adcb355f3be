"""Euler-angle rotation attacks and rotation-pool retraining for a small NumPy point-cloud classifier."""

from rotadv.errors import (
    ConfigurationError,
    DegenerateInputError,
    FormatError,
    InvalidInputError,
    ParseError,
    PoolMissError,
    RotadvError,
    UndefinedMetricError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DegenerateInputError",
    "FormatError",
    "InvalidInputError",
    "ParseError",
    "PoolMissError",
    "RotadvError",
    "UndefinedMetricError",
    "__version__",
]
