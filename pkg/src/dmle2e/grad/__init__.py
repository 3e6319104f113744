"""Reverse-mode differentiation engine (tape, primitives, checks)."""

from .engine import Node, Tape, TapeUsageError
from . import ops
from .checks import check_gradient, primitive_checks, run_primitive_checks

__all__ = [
    "Node",
    "Tape",
    "TapeUsageError",
    "ops",
    "check_gradient",
    "primitive_checks",
    "run_primitive_checks",
]
