"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class DSRLError(Exception):
    """Base class for toolkit errors."""


class ShapeError(DSRLError, ValueError):
    """Array dimensions do not agree with what an operation expects."""


class NumericError(DSRLError, ArithmeticError):
    """A computation produced or received a non-finite value."""

    def __init__(self, message: str, *, layer: int | None = None) -> None:
        super().__init__(message)
        self.layer = layer


class SingularSystemError(NumericError):
    """Linear system is numerically singular (pivot below threshold)."""


class DegeneracyError(NumericError):
    """KKT system of a QP solution is singular (degenerate active set)."""


class SingularityError(NumericError):
    """Virtual control cannot be inverted to a physical attitude (zero thrust)."""


class ConfigError(DSRLError, ValueError):
    """Run configuration failed validation; ``field`` names the offending key."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field
