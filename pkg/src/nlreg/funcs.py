"""Registry of the element-wise nonlinearities used across experiments.

Functions are registered statically; ids appear verbatim in CLI flags and
config files. The a*x + cos(k*x) family is monotone for a > k, so its
derivative infimum a - k is strictly positive.
"""

from __future__ import annotations

import numpy as np

from .core import NonlinearScalarFunction


def _identity() -> NonlinearScalarFunction:
    return NonlinearScalarFunction(
        id="identity",
        value=lambda x: np.asarray(x, dtype=float),
        derivative=lambda x: np.ones_like(np.asarray(x, dtype=float)),
        second_derivative=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        derivative_sup=1.0,
        derivative_inf=1.0,
        closed_form="x",
    )


def _linear_plus_cos(fid: str, a: float, k: float) -> NonlinearScalarFunction:
    # d/dx [a x + cos(k x)] = a - k sin(k x), bounded in [a - k, a + k]
    def value(x, a=a, k=k):
        x = np.asarray(x, dtype=float)
        return a * x + np.cos(k * x)

    def derivative(x, a=a, k=k):
        x = np.asarray(x, dtype=float)
        return a - k * np.sin(k * x)

    def second_derivative(x, k=k):
        x = np.asarray(x, dtype=float)
        return -(k * k) * np.cos(k * x)

    return NonlinearScalarFunction(
        id=fid,
        value=value,
        derivative=derivative,
        second_derivative=second_derivative,
        derivative_sup=a + k,
        derivative_inf=a - k,
        closed_form=f"{a:g}x+cos({k:g}x)",
    )


_REGISTRY = {
    "identity": _identity(),
    "2x+cos(x)": _linear_plus_cos("2x+cos(x)", 2.0, 1.0),
    "10x+cos(2x)": _linear_plus_cos("10x+cos(2x)", 10.0, 2.0),
    "10x+cos(3x)": _linear_plus_cos("10x+cos(3x)", 10.0, 3.0),
    "10x+cos(4x)": _linear_plus_cos("10x+cos(4x)", 10.0, 4.0),
}


def function_ids() -> tuple[str, ...]:
    return tuple(_REGISTRY)


def get_function(fid: str) -> NonlinearScalarFunction:
    """Look up a registered nonlinearity by id."""
    try:
        return _REGISTRY[fid]
    except KeyError:
        raise KeyError(
            f"unknown function id {fid!r}; registered: {', '.join(_REGISTRY)}"
        ) from None
