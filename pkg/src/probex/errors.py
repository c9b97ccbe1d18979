"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ProbexError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ProbexError, ValueError):
    """Array shapes do not conform."""


class DegenerateInputError(ProbexError, ValueError):
    """Input is valid in shape but degenerate (zero norm, no cluster gap, ...)."""


class ConfigError(ProbexError, ValueError):
    """Invalid configuration or precondition."""


class FormatError(ProbexError, ValueError):
    """A persisted file is malformed."""


class NumericError(ProbexError, FloatingPointError):
    """Non-finite values appeared during computation."""


class DataError(ProbexError, KeyError):
    """Required data (e.g. an embedding key) is missing."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class UnsupportedError(ProbexError, NotImplementedError):
    """The requested operation is not defined for this configuration."""
