"""Distributionally safe reinforcement learning with a differentiable CBF safety filter."""

from __future__ import annotations

__version__ = "0.1.0"

from . import _backend
from .errors import ConfigError, DegeneracyError, DSRLError, NumericError, ShapeError, SingularityError, SingularSystemError

BACKEND = _backend.NAME

__all__ = [
    "BACKEND",
    "ConfigError",
    "DSRLError",
    "DegeneracyError",
    "NumericError",
    "ShapeError",
    "SingularSystemError",
    "SingularityError",
    "__version__",
]
