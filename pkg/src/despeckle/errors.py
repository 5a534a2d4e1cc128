"""Exception types shared across the toolkit.

Every error raised on purpose by this package derives from ``DespeckleError``
so callers can catch the whole family, while the concrete subclasses keep the
failure modes distinguishable (bad shapes vs. bad values vs. bad state).
"""


class DespeckleError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DespeckleError, ValueError):
    """Operands have incompatible or unsupported shapes."""


class DomainError(DespeckleError, ValueError):
    """An input value lies outside the operation's domain."""


class ConfigError(DespeckleError, ValueError):
    """A configuration object violates its constraints."""


class StateError(DespeckleError, RuntimeError):
    """An operation was invoked on an object in the wrong state."""


class NumericError(DespeckleError, ArithmeticError):
    """A computation produced a non-finite value."""


class FormatError(DespeckleError, ValueError):
    """A serialized payload (checkpoint, raster) is malformed."""


class QuantizationError(DespeckleError, ValueError):
    """Gray-level quantization cannot proceed on the given data."""


class BlockSelectionError(DespeckleError, RuntimeError):
    """No sufficiently homogeneous image block could be found."""


class DivergenceError(DespeckleError, RuntimeError):
    """Training hit a non-finite loss and was aborted."""
