"""Sparse nonlinear regression: classical shrinkage-thresholding solvers, a
trainable unrolled network, and constructive linear-convergence certificates
for the model y = f(A x*) + eps."""

__version__ = "0.1.0"

from .core import (NonlinearScalarFunction, ProblemInstance, SolverTrace,
                   loss, loss_gradient, nmse_db, soft_threshold)
from .funcs import function_ids, get_function

__all__ = [
    "NonlinearScalarFunction", "ProblemInstance", "SolverTrace",
    "function_ids", "get_function", "loss", "loss_gradient", "nmse_db",
    "soft_threshold", "__version__",
]
