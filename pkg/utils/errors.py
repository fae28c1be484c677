"""
HLSIRM - Error Types

Every error raised on purpose by the engine derives from ``HlsirmError``.
Subclasses also inherit the closest builtin so callers can catch either.
"""
from typing import Any, Dict, Optional


class HlsirmError(Exception):
    """Base error with a message and structured details."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.details = details or {}
        super().__init__(self.message)


class DataFormatError(HlsirmError, ValueError):
    """Malformed input file (header, encoding, layout)."""


class ResponseValueError(HlsirmError, ValueError):
    """A response cell or raw Likert value outside its allowed set."""


class DuplicateRecordError(HlsirmError, ValueError):
    """Repeated (group_id, student_id) or repeated identifiers."""


class ConfigurationError(HlsirmError, ValueError):
    """Invalid or incomplete configuration."""


class ValidityError(HlsirmError, ValueError):
    """A parameter violates its domain (e.g. non-SPD covariance)."""


class ShapeError(HlsirmError, ValueError):
    """Dimension mismatch between state, data or arrays."""


class BoundsError(HlsirmError, IndexError):
    """Index out of range."""


class NumericalError(HlsirmError, ArithmeticError):
    """Numerical breakdown; ``details`` carries a diagnostic dump."""


class ArgumentError(HlsirmError, ValueError):
    """Invalid call arguments (empty chain, unknown policy)."""


class UndefinedMetricError(HlsirmError, ValueError):
    """A metric has no defined value for the given input."""
