"""Exception types shared across the package."""


class HfcLabError(Exception):
    """Base class for all package errors."""


class ShapeError(HfcLabError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(HfcLabError, ValueError):
    """A configuration or precondition on inputs is violated."""


class NotPDError(HfcLabError, ArithmeticError):
    """Matrix is not positive definite; ``pivot`` is the failing 0-based index."""

    def __init__(self, pivot, value=None):
        self.pivot = pivot
        self.value = value
        super().__init__(f"matrix not positive definite at pivot {pivot} (value={value})")


class DegenerateDataError(HfcLabError, ValueError):
    """Data carries no usable variation (e.g. all samples identical)."""


class MissingPairError(HfcLabError, KeyError):
    """A with-HFC report has no matching without-HFC report, or vice versa."""


class PreconditionError(HfcLabError):
    """A run cannot proceed in the current state (existing outputs, mixed configurations)."""
