"""Exception types shared across the package."""


class NumericError(RuntimeError):
    """A computation produced a non-finite or otherwise unusable value."""


class DivergenceError(NumericError):
    """Training loss blew past the divergence threshold."""


class RangeError(ValueError):
    """A latent coordinate lies outside the attainable range of the flow."""

    def __init__(self, dim, message=None):
        self.dim = dim
        super().__init__(message or f"latent coordinate out of range in dimension {dim}")


class SaturationError(RuntimeError):
    """Sampling rejected more than half of the draws over the counting window."""


class FormatError(ValueError):
    """A file did not match its declared binary or text format."""
