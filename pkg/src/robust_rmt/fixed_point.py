"""Picard iteration for self-maps of positive diagonals.

Convergence is measured in the stable semi-metric, in which the maps of this
package are contractions.  Damping interpolates geometrically,

    x_{k+1} = x_k^(1 - a) * f(x_k)^a,

so iterates stay positive by construction.  Hitting ``max_iter`` is reported
through ``converged=False`` rather than raised.

Complex-valued fixed points (resolvent traces off the real axis) are handled
by :func:`solve_complex`, which damps arithmetically and measures relative
sup-norm steps since the semi-metric is undefined there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import DivergenceError, DomainError
from .stable_metric import _stable_distance_unchecked, check_weights


@dataclass
class FixedPointProblem:
    map: Callable
    init: np.ndarray
    tol: float = 1e-13
    max_iter: int = 1000
    damping: float = 1.0

    def __post_init__(self):
        self.init = check_weights(self.init, "init")
        if not self.tol > 0:
            raise DomainError("tol must be positive")
        if int(self.max_iter) < 1:
            raise DomainError("max_iter must be at least 1")
        if not 0 < self.damping <= 1:
            raise DomainError("damping must lie in (0, 1]")


@dataclass
class FixedPointSolution:
    point: np.ndarray
    iterations: int
    final_step: float
    converged: bool
    observed_rates: np.ndarray = field(default_factory=lambda: np.empty(0))
    steps: np.ndarray = field(default_factory=lambda: np.empty(0))
    sup_steps: np.ndarray = field(default_factory=lambda: np.empty(0))
    history: list = field(default_factory=list, repr=False)


def _checked(values, last, k):
    values = np.asarray(values, dtype=float)
    if values.shape != last.shape or not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise DivergenceError(f"map left the positive orthant at iteration {k}",
                              last_iterate=last.copy(), iteration=k)
    return values


def solve(problem: FixedPointProblem, record_history=False):
    """Iterate ``problem.map`` from ``problem.init`` until the d_s step is below tol.

    Returns
    -------
    FixedPointSolution
        ``observed_rates[k]`` is the ratio of consecutive d_s steps.

    Raises
    ------
    DivergenceError
        If an image is non-finite or non-positive; carries the last valid
        iterate.
    """
    f, a = problem.map, float(problem.damping)
    x = problem.init.copy()
    steps, sups, history = [], [], []
    if record_history:
        history.append(x.copy())
    converged = False
    k = 0
    for k in range(1, int(problem.max_iter) + 1):
        fx = _checked(f(x), x, k)
        new = fx if a == 1.0 else np.exp((1 - a) * np.log(x) + a * np.log(fx))
        step = _stable_distance_unchecked(new, x)
        steps.append(step)
        sups.append(float(np.max(np.abs(new - x))))
        x = new
        if record_history:
            history.append(x.copy())
        if step <= problem.tol:
            converged = True
            break
    steps = np.asarray(steps)
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = steps[1:] / steps[:-1]
    rates = rates[np.isfinite(rates)]
    return FixedPointSolution(point=x, iterations=k, final_step=float(steps[-1]), converged=converged,
                              observed_rates=rates, steps=steps, sup_steps=np.asarray(sups),
                              history=history)


def fixed_point(func, init, tol=1e-13, max_iter=1000, damping=1.0, record_history=False):
    """Shorthand for ``solve(FixedPointProblem(func, init, ...))``."""
    return solve(FixedPointProblem(func, init, tol, max_iter, damping), record_history)


def iterate_bounds(first_step, rate):
    """Multiplicative envelope of Picard iterates of a ``rate``-contraction.

    All iterates satisfy ``lower * x1 <= x_k <= upper * x1`` entrywise, where
    ``x1`` is the first image and ``first_step = d_s(x1, x0)``.  Because
    ``|log(a/b)| <= d_s(a, b)`` the log-iterates move by at most
    ``rate^k * first_step`` at step ``k``, giving the geometric-series bound
    ``exp(-+ rate * first_step / (1 - rate))``.
    """
    rate = float(rate)
    first_step = float(first_step)
    if not 0 <= rate < 1:
        raise DomainError("rate must lie in [0, 1)")
    if first_step < 0:
        raise DomainError("first_step must be non-negative")
    radius = rate * first_step / (1 - rate)
    return math.exp(-radius), math.exp(radius)


@dataclass
class ComplexSolution:
    point: np.ndarray
    iterations: int
    final_step: float
    converged: bool


def solve_complex(func, init, tol=1e-13, max_iter=20000, damping=0.5):
    """Damped Picard iteration for complex fixed points.

    The step is the relative sup-norm change ``max|x_{k+1} - x_k| / max|x_k|``.
    Non-convergence is reported, not raised; non-finite images raise
    :class:`DivergenceError`.
    """
    x = np.atleast_1d(np.asarray(init, dtype=complex)).copy()
    step = math.inf
    k = 0
    for k in range(1, int(max_iter) + 1):
        fx = np.asarray(func(x), dtype=complex)
        if fx.shape != x.shape or not np.all(np.isfinite(fx)):
            raise DivergenceError(f"complex map became non-finite at iteration {k}",
                                  last_iterate=x.copy(), iteration=k)
        new = (1 - damping) * x + damping * fx
        scale = max(float(np.max(np.abs(new))), 1e-300)
        step = float(np.max(np.abs(new - x))) / scale
        x = new
        if step <= tol:
            return ComplexSolution(x, k, step, True)
    return ComplexSolution(x, k, step, False)
