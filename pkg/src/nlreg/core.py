"""Shared problem types, the soft-threshold operator, and recovery metrics.

The measurement model throughout the package is ``y = f(A x*) + eps`` with an
element-wise nonlinearity ``f``, a column-normalized dictionary ``A`` (m x n,
m < n) and a sparse ground truth ``x*``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

COLUMN_NORM_TOL = 1e-12


@dataclass(frozen=True)
class NonlinearScalarFunction:
    """Element-wise scalar map with analytic derivatives and derivative bounds.

    ``value``, ``derivative`` and ``second_derivative`` accept and return numpy
    arrays (they are plain ufunc-style callables). ``derivative_sup`` bounds
    |f'| on the working interval; ``derivative_inf`` is the infimum of |f'|
    (0 if the derivative can vanish).
    """

    id: str
    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    second_derivative: Callable[[np.ndarray], np.ndarray]
    derivative_sup: float
    derivative_inf: float
    closed_form: str = ""


def _readonly(arr) -> np.ndarray:
    out = np.asarray(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ProblemInstance:
    """One measurement y = f(A x*) + epsilon plus generation metadata.

    Columns of A must have unit l2 norm (within COLUMN_NORM_TOL). Arrays are
    made read-only at construction; instances are safe to share across threads.
    """

    A: np.ndarray
    x_star: np.ndarray
    epsilon: np.ndarray
    y: np.ndarray
    seed: int = 0
    snr_db: Optional[float] = None
    cond_target: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 2:
            raise ValueError(f"A must be 2-D, got shape {A.shape}")
        m, n = A.shape
        for name, v, dim in (("x_star", self.x_star, n),
                             ("epsilon", self.epsilon, m),
                             ("y", self.y, m)):
            v = np.asarray(v, dtype=float)
            if v.shape != (dim,):
                raise ValueError(f"{name} must have shape ({dim},), got {v.shape}")
        norms = np.linalg.norm(A, axis=0)
        if np.any(np.abs(norms - 1.0) > COLUMN_NORM_TOL):
            worst = float(np.abs(norms - 1.0).max())
            raise ValueError(
                f"columns of A must have unit l2 norm (max deviation {worst:.3e})")
        object.__setattr__(self, "A", _readonly(A))
        object.__setattr__(self, "x_star", _readonly(self.x_star))
        object.__setattr__(self, "epsilon", _readonly(self.epsilon))
        object.__setattr__(self, "y", _readonly(self.y))

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    def check_consistency(self, f: NonlinearScalarFunction, atol: float = 1e-10) -> bool:
        """True if y == f(A x*) + epsilon within atol (re-derivability check)."""
        resid = self.y - f.value(self.A @ self.x_star) - self.epsilon
        return bool(np.max(np.abs(resid)) <= atol)


@dataclass
class SolverTrace:
    """Iterate history x^(0..T) of one solver run plus timing and settings.

    ``iterates`` has shape (T+1, n) with iterates[0] == 0 (all solvers start
    from the origin); ``wall_times`` holds per-iteration seconds, length T.
    """

    iterates: np.ndarray
    wall_times: np.ndarray
    solver_id: str
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        self.iterates = np.asarray(self.iterates, dtype=float)
        self.wall_times = np.asarray(self.wall_times, dtype=float)
        if self.iterates.ndim != 2:
            raise ValueError("iterates must be a (T+1, n) array")
        if np.any(self.iterates[0] != 0.0):
            raise ValueError("iterates[0] must be the all-zeros vector")
        if len(self.wall_times) != len(self.iterates) - 1:
            raise ValueError("wall_times must have length len(iterates) - 1")

    @property
    def T(self) -> int:
        return len(self.iterates) - 1


def soft_threshold(u, a: float) -> np.ndarray:
    """eta(u, a) = sign(u) * max(|u| - a, 0), elementwise.

    The proximal operator of a*||.||_1; a must be a nonnegative scalar
    (per-coordinate thresholds are out of scope).
    """
    a = float(a)
    if a < 0:
        raise ValueError(f"threshold must be nonnegative, got {a}")
    u = np.asarray(u, dtype=float)
    return np.sign(u) * np.maximum(np.abs(u) - a, 0.0)


def _check_dim(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise ValueError(f"x must have shape ({n},), got {x.shape}")
    return x


def loss(x, problem: ProblemInstance, f: NonlinearScalarFunction) -> float:
    """Least-squares data fit L(x) = 0.5 * ||y - f(Ax)||_2^2."""
    x = _check_dim(x, problem.n)
    r = problem.y - f.value(problem.A @ x)
    return 0.5 * float(r @ r)


def loss_gradient(x, problem: ProblemInstance, f: NonlinearScalarFunction) -> np.ndarray:
    """Gradient of L: A^T diag(f'(Ax)) (f(Ax) - y).

    diag(f'(Ax)) is the Jacobian of the element-wise f at Ax.
    """
    x = _check_dim(x, problem.n)
    u = problem.A @ x
    return problem.A.T @ (f.derivative(u) * (f.value(u) - problem.y))


def objective(x, problem: ProblemInstance, f: NonlinearScalarFunction, lam: float) -> float:
    """Composite solver objective phi(x) = L(x) + lam * ||x||_1."""
    return loss(x, problem, f) + lam * float(np.abs(np.asarray(x)).sum())


def nmse_db(estimates, truths) -> float:
    """Normalized mean square error in dB over a batch.

    10*log10(mean_b ||xhat_b - x*_b||^2 / mean_b ||x*_b||^2). Returns -inf for
    exact recovery of the whole batch; raises if the truths are all zero.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    tru = np.atleast_2d(np.asarray(truths, dtype=float))
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch: estimates {est.shape} vs truths {tru.shape}")
    if est.shape[0] == 0:
        raise ValueError("empty batch")
    denom = float(np.mean(np.sum(tru * tru, axis=1)))
    if denom <= 0.0:
        raise ValueError("NMSE undefined: truths have zero mean squared norm")
    diff = est - tru
    num = float(np.mean(np.sum(diff * diff, axis=1)))
    if num == 0.0:
        return float("-inf")
    return 10.0 * math.log10(num / denom)


def format_metric(v: float) -> str:
    """Fixed CSV rendering for metric values; -inf prints as '-inf'."""
    if v == float("-inf"):
        return "-inf"
    return f"{v:.12g}"
