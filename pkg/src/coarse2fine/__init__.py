"""Coarse-to-fine mask prompt generation on a small numpy tape."""

from .numerics import (
    NonFiniteError,
    OpCounter,
    ShapeError,
    Tape,
    Tensor,
    counting,
    grad_check,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "OpCounter",
    "counting",
    "grad_check",
    "ShapeError",
    "NonFiniteError",
    "__version__",
]
