"""Exception types shared across the package."""
from __future__ import annotations


class ShapeError(ValueError):
    """Array shapes do not match the grid or model dimensions."""


class BlowUpError(ArithmeticError):
    """A time integration produced non-finite values."""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} (t = {time:.6g})")
        self.time = time


class NonConvergenceError(RuntimeError):
    """An iterative scheme hit its iteration cap."""

    def __init__(self, message: str, last=None, residual: float | None = None):
        super().__init__(message)
        self.last = last
        self.residual = residual
