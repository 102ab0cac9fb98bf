"""Reverse-mode autodiff over numpy arrays, plus seeded RNG streams."""

from . import ops
from .engine import (
    NumericsError,
    Parameter,
    Parameters,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    as_tensor,
)
from .gradcheck import grad_check
from .rng import Rng, stream

__all__ = [
    "NumericsError",
    "Parameter",
    "Parameters",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "grad_check",
    "ops",
    "Rng",
    "stream",
]
