"""Exception types shared across the package."""


class PancanError(Exception):
    """Base class for all package errors."""


class ShapeError(PancanError, ValueError):
    """Matrix dimensions do not satisfy an operation's contract."""


class ConfigError(PancanError, ValueError):
    """Inconsistent or invalid configuration, detected before any computation."""


class FormatError(PancanError, ValueError):
    """Malformed file content; message carries position information."""


class DivergenceError(PancanError, RuntimeError):
    """Fixed-point iteration rejected because the contraction condition fails."""


class ConvergenceError(PancanError, RuntimeError):
    """Iteration budget exhausted; carries the last residual."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class EvaluationError(PancanError, RuntimeError):
    """A numeric evaluation produced non-finite values."""
