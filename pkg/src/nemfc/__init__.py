"""Heterogeneous (non-exchangeable) mean-field control: Riccati solver, particle
simulation, adjoint and FBSDE solvers, and optimality checks."""

__version__ = "0.1.0"

from .errors import BlowUpError, NonConvergenceError, ShapeError
from .grid import LabelGrid, integrate_labels, kernel_apply, make_uniform_grid
from .model import (GenericModel, InitialCondition, LQModel, ValidationReport, lq_as_generic,
                    validate_lq)
from .riccati import AffineFeedback, RiccatiSolution, feedback_control, solve_all

__all__ = [
    "BlowUpError", "NonConvergenceError", "ShapeError",
    "LabelGrid", "integrate_labels", "kernel_apply", "make_uniform_grid",
    "GenericModel", "InitialCondition", "LQModel", "ValidationReport", "lq_as_generic",
    "validate_lq",
    "AffineFeedback", "RiccatiSolution", "feedback_control", "solve_all",
    "__version__",
]
