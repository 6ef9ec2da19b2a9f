"""Conditional density estimation with a hyper-conditioned autoregressive flow."""

from .errors import (
    DivergenceError,
    FormatError,
    NumericError,
    RangeError,
    SaturationError,
)

__version__ = "0.1.0"

__all__ = [
    "DivergenceError",
    "FormatError",
    "NumericError",
    "RangeError",
    "SaturationError",
    "__version__",
]
