"""Exception types shared across the package."""

from __future__ import annotations


class StvflowError(Exception):
    """Base class for package errors."""


class GridMismatchError(StvflowError, ValueError):
    """Two fields that must share a grid do not."""


class ConvergenceError(StvflowError, RuntimeError):
    """An iterative solver hit its iteration cap.

    Attributes
    ----------
    residual : float
        Relative residual at the last iterate.
    history : list of float
        Residual after each iteration, useful when diagnosing stalls.
    """

    def __init__(self, message: str, residual: float, history=None):
        super().__init__(f"{message} (final relative residual {residual:.3e})")
        self.residual = residual
        self.history = list(history or [])


class ConfigError(StvflowError, ValueError):
    """Invalid run configuration; message carries line/field context."""
