"""Stable semi-metric on positive diagonal matrices and weight-function checks.

Positive diagonal matrices are stored as 1-D float arrays of their diagonal.
The semi-metric is

    d_s(a, b) = max_i |a_i - b_i| / sqrt(a_i b_i),

which is invariant under entrywise scaling and inversion but does not satisfy
the triangle inequality.  A scalar map f is 1-Lipschitz for d_s exactly when
t -> t f(t) is non-decreasing and t -> f(t) / t is non-increasing; this is the
property certified (on a grid) by :func:`check_stable_on_grid`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from .exceptions import DimensionError, DomainError

DEFAULT_GRID_BOUNDS = (1e-6, 1e6)
DEFAULT_GRID_SIZE = 4096
STABILITY_RTOL = 1e-12


def default_grid(lo=DEFAULT_GRID_BOUNDS[0], hi=DEFAULT_GRID_BOUNDS[1], num=DEFAULT_GRID_SIZE):
    """Log-spaced probe points used by the admissibility checks."""
    return np.logspace(math.log10(lo), math.log10(hi), num)


def check_weights(x, name="weights"):
    """Validate and return a positive diagonal as a 1-D float array."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionError(f"{name} must have at least one entry")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite entries")
    if np.any(arr <= 0):
        raise DomainError(f"{name} must be strictly positive", probe=float(arr.min()))
    return arr


def stable_distance(a, b):
    """Stable semi-metric between two positive diagonals.

    Parameters
    ----------
    a, b : array_like
        Diagonals of equal length with strictly positive entries.  Scalars
        are treated as diagonals of length one.

    Returns
    -------
    float
        ``max_i |a_i - b_i| / sqrt(a_i * b_i)``.

    Examples
    --------
    >>> stable_distance(4.0, 1.0)
    1.5
    """
    a = check_weights(a, "a")
    b = check_weights(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    return float(np.max(np.abs(a - b) / np.sqrt(a * b)))


def _stable_distance_unchecked(a, b):
    # hot path for the solvers, inputs already validated
    return float(np.max(np.abs(a - b) / np.sqrt(a * b)))


def geometric_interpolants(x, z, p):
    """``y_i = x^((p-i)/p) z^(i/p)`` for ``i = 0..p``.

    Consecutive points are equally spaced in log scale, so each link of the
    chain has length ``d_s(x^(1/p), z^(1/p))``; this chain minimizes the sum
    of link lengths from ``x`` to ``z``.
    """
    x = check_weights(x, "x")
    z = check_weights(z, "z")
    if x.shape != z.shape:
        raise DimensionError("length mismatch")
    if int(p) < 1:
        raise DomainError("p must be a positive integer")
    frac = np.arange(int(p) + 1)[:, None] / int(p)
    return np.exp((1 - frac) * np.log(x) + frac * np.log(z))


@dataclass(frozen=True)
class StabilityReport:
    is_stable: bool
    first_violation: Optional[Tuple[float, float]] = None
    reason: str = ""


def _evaluate_on_grid(f, grid):
    try:
        values = np.asarray(f(grid), dtype=float)
        if values.shape != grid.shape:
            raise ValueError
    except (TypeError, ValueError):
        values = np.array([float(f(t)) for t in grid])
    return values


def check_stable_on_grid(f, grid=None, rtol=STABILITY_RTOL):
    """Certify scalar stability of ``f`` on consecutive grid points.

    ``f`` is stable on the grid when ``t * f(t)`` never decreases and
    ``f(t) / t`` never increases between consecutive probes, up to a relative
    slack of ``rtol``.

    Raises
    ------
    DomainError
        If ``f`` returns a non-positive or non-finite value; the offending
        probe is attached as ``err.probe``.
    """
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise DimensionError("grid must be a non-empty 1-D sequence")
    if np.any(grid <= 0):
        raise DomainError("grid must be strictly positive", probe=float(grid.min()))
    if np.any(np.diff(grid) <= 0):
        raise DomainError("grid must be sorted strictly ascending")

    values = _evaluate_on_grid(f, grid)
    bad = ~np.isfinite(values) | (values <= 0)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise DomainError(f"f({grid[i]!r}) = {values[i]!r} is not positive and finite", probe=float(grid[i]))

    prod = grid * values
    quot = values / grid
    dec = prod[1:] < prod[:-1] - rtol * np.abs(prod[:-1])
    inc = quot[1:] > quot[:-1] + rtol * np.abs(quot[:-1])
    viol = dec | inc
    if not np.any(viol):
        return StabilityReport(True)
    i = int(np.argmax(viol))
    reason = "t*f(t) decreases" if dec[i] else "f(t)/t increases"
    return StabilityReport(False, (float(grid[i]), float(grid[i + 1])), reason)


@dataclass(frozen=True, eq=False)
class WeightFunction:
    """Weight map ``u`` with declared bounds.

    ``u_sup`` bounds ``u`` and ``u_times_sup`` bounds ``t * u(t)``; both are
    declared by the caller and cross-checked on ``admissibility_grid``.  Use
    ``math.inf`` for a bound that does not exist.
    """

    func: Callable
    u_sup: float
    u_times_sup: float
    name: str = "custom"
    admissibility_grid: np.ndarray = field(default_factory=default_grid, repr=False)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(~(t > 0)):
            raise DomainError(f"weight function {self.name} is only defined for t > 0")
        return np.asarray(self.func(t), dtype=float)

    def times(self, t):
        """``t * u(t)``."""
        t = np.asarray(t, dtype=float)
        return t * self(t)


@dataclass(frozen=True)
class AdmissibilityReport:
    bounded: bool
    stable: bool
    u_times_below_one: bool
    prediction_mode: bool
    stability: StabilityReport
    max_u: float
    max_u_times: float

    @property
    def ok(self):
        base = self.bounded and self.stable
        return base and (self.u_times_below_one or not self.prediction_mode)

    def describe(self):
        parts = [
            f"bounded={self.bounded} (max u on grid {self.max_u:.6g})",
            f"stable={self.stable}" + (f" ({self.stability.reason} at {self.stability.first_violation})"
                                        if not self.stable else ""),
            f"u_times_below_one={self.u_times_below_one} (max t*u on grid {self.max_u_times:.6g})",
        ]
        return "; ".join(parts)


def verify_weight_admissibility(u: WeightFunction, prediction_mode=False):
    """Report whether ``u`` is bounded, stable and has ``t u(t) < 1``.

    Never raises: domain failures of ``u`` itself are folded into
    ``stable=False``.
    """
    grid = np.asarray(u.admissibility_grid, dtype=float)
    values = _evaluate_on_grid(u.func, grid)
    finite = np.all(np.isfinite(values))
    max_u = float(np.max(values)) if finite else math.inf
    max_times = float(np.max(grid * values)) if finite else math.inf
    slack = 1 + STABILITY_RTOL

    bounded = bool(finite and math.isfinite(u.u_sup) and max_u <= u.u_sup * slack
                   and np.all(values >= 0))
    try:
        # u may vanish on part of the grid (e.g. the zero fixture); stability
        # is then checked on the positive part only.
        pos = values > 0
        stability = check_stable_on_grid(u.func, grid[pos]) if np.any(pos) else StabilityReport(True)
    except DomainError as err:
        stability = StabilityReport(False, (err.probe, err.probe), str(err))
    below_one = bool(finite and u.u_times_sup < 1 and max_times <= u.u_times_sup * slack)
    return AdmissibilityReport(bounded, stability.is_stable, below_one, bool(prediction_mode),
                               stability, max_u, max_times)


# Built-in weight functions -------------------------------------------------

def min_lin_inv(a=5.0):
    """``t -> min(t, 1 / (1 + a t))``, bounded with ``t u(t) -> 1/a``."""
    a = float(a)
    if a <= 0:
        raise DomainError("min_lin_inv needs a > 0")
    # crossing point of t and 1/(1+a t)
    cross = (math.sqrt(1 + 4 * a) - 1) / (2 * a)
    return WeightFunction(lambda t: np.minimum(t, 1.0 / (1.0 + a * t)),
                          u_sup=cross, u_times_sup=1.0 / a, name=f"min_lin_inv({a:g})")


def tent_max():
    return WeightFunction(lambda t: np.maximum(np.sqrt(t), 1.0 / t),
                          u_sup=math.inf, u_times_sup=math.inf, name="tent_max")


def inv_sqrt():
    return WeightFunction(lambda t: 1.0 / np.sqrt(t), u_sup=math.inf, u_times_sup=math.inf,
                          name="inv_sqrt")


def inverse():
    """``t -> 1/t``: stable but neither bounded nor contracting."""
    return WeightFunction(lambda t: 1.0 / t, u_sup=math.inf, u_times_sup=1.0, name="inverse")


def constant(c=1.0):
    c = float(c)
    if c < 0:
        raise DomainError("constant weight must be non-negative")
    return WeightFunction(lambda t: np.full_like(np.asarray(t, dtype=float), c),
                          u_sup=c, u_times_sup=math.inf if c > 0 else 0.0, name=f"constant({c:g})")


def tent_infimum_map(t, levels=80):
    """Infimum over ``k`` of ``max(3/2 - 2^(k-1) t, 2^(k-1) t)``.

    A stable map with no continuous extension at 0: it equals 1 at every
    ``2^-k`` and 3/4 at every ``3 * 2^-(k+2)``.
    """
    t = np.asarray(t, dtype=float)
    slopes = np.ldexp(1.0, np.arange(levels) - 1)
    tt = t[..., None]
    return np.min(np.maximum(1.5 - slopes * tt, slopes * tt), axis=-1)


def tent_infimum():
    return WeightFunction(tent_infimum_map, u_sup=math.inf, u_times_sup=math.inf,
                          name="tent_infimum")


REGISTRY = {
    "min_lin_inv": min_lin_inv,
    "tent_max": tent_max,
    "inv_sqrt": inv_sqrt,
    "inverse": inverse,
    "constant": constant,
    "tent_infimum": tent_infimum,
}

_SPEC_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*$")


def get_weight_function(spec):
    """Build a registered weight function from ``"name"`` or ``"name(args)"``.

    >>> get_weight_function("min_lin_inv(5)").name
    'min_lin_inv(5)'
    """
    if isinstance(spec, WeightFunction):
        return spec
    match = _SPEC_RE.match(str(spec))
    if not match or match.group(1) not in REGISTRY:
        raise KeyError(f"unknown weight function {spec!r}; known: {sorted(REGISTRY)}")
    name, argstr = match.groups()
    args = [float(a) for a in argstr.split(",") if a.strip()] if argstr else []
    return REGISTRY[name](*args)
