"""Synthetic concentrated data, heavy-tailed scalings and population moments.

The data model is ``X = Z sqrt(tau) + m 1^T``: column ``i`` is
``sqrt(tau_i) z_i + m``.  Every random quantity is drawn from its own
:class:`numpy.random.SeedSequence` substream keyed by ``(seed, stream, index)``
so a single column can be regenerated in isolation and results do not depend
on how work is split across workers.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .exceptions import ConfigError, DimensionError, DomainError

KINDS = ("gaussian", "sin_correlated", "custom_lipschitz")
TAU_LAWS = ("constant", "student_abs", "pareto")

# substream tags
_COLUMN, _TAU, _MIXING, _MOMENTS = 0, 1, 2, 3

LIPSCHITZ_MAPS = {
    "sin": np.sin,
    "tanh": np.tanh,
    "identity": lambda w: w,
}

MOMENT_CHUNK = 2048


def _rng(seed, tag, index=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2 ** 64, tag, int(index)]))


@dataclass(frozen=True)
class TauLaw:
    name: str
    param: float

    @classmethod
    def parse(cls, spec):
        """Parse ``"constant(1)"``, ``"student_abs(1)"`` or ``"pareto(2.5)"``."""
        if isinstance(spec, TauLaw):
            return spec
        match = re.fullmatch(r"\s*([a-z_]+)\s*\(\s*([^)]*)\s*\)\s*", str(spec))
        if not match or match.group(1) not in TAU_LAWS:
            raise ConfigError(f"unknown tau law {spec!r}; expected one of {TAU_LAWS} with a parameter")
        try:
            param = float(match.group(2))
        except ValueError as err:
            raise ConfigError(f"bad tau law parameter in {spec!r}") from err
        if not param > 0:
            raise ConfigError(f"tau law parameter must be positive, got {param}")
        return cls(match.group(1), param)

    def __str__(self):
        return f"{self.name}({self.param:g})"


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """Description of a synthetic data set.

    Parameters
    ----------
    kind : {"gaussian", "sin_correlated", "custom_lipschitz"}
        ``gaussian`` draws i.i.d. standard normal ``z``; ``sin_correlated``
        uses ``z = sin(A g)``; ``custom_lipschitz`` applies ``lipschitz_map``
        entrywise to ``A g``.
    p, n : int
    mixing : ndarray, "random" or None
        Mixing matrix ``A``.  ``"random"`` draws i.i.d. standard normal
        entries from ``mixing_seed`` (``seed`` when omitted).
    normalize : bool
        Rescale ``A`` to unit spectral norm so ``g -> sin(A g)`` is
        1-Lipschitz.
    tau_law : str or TauLaw
    signal_scale : float
        ``m = signal_scale * (1, ..., 1) / sqrt(p)``.
    seed : int
    """

    kind: str
    p: int
    n: int
    mixing: Union[np.ndarray, str, None] = None
    normalize: bool = True
    tau_law: Union[str, TauLaw] = "constant(1)"
    signal_scale: float = 0.0
    seed: int = 0
    mixing_seed: Optional[int] = None
    lipschitz_map: Union[str, Callable] = "tanh"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown generator kind {self.kind!r}; expected one of {KINDS}")
        if int(self.p) < 1 or int(self.n) < 1:
            raise ConfigError("p and n must be positive integers")
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "tau_law", TauLaw.parse(self.tau_law))
        if isinstance(self.mixing, str) and self.mixing != "random":
            raise ConfigError(f"mixing must be a matrix or 'random', got {self.mixing!r}")
        if isinstance(self.lipschitz_map, str) and self.lipschitz_map not in LIPSCHITZ_MAPS:
            raise ConfigError(f"unknown Lipschitz map {self.lipschitz_map!r}")

    def mixing_matrix(self):
        """The (possibly normalized) mixing matrix, or ``None`` for gaussian data."""
        if self.kind == "gaussian":
            return None
        if self.mixing is None:
            raise ConfigError(f"{self.kind} generator needs a mixing matrix")
        if isinstance(self.mixing, str):
            seed = self.seed if self.mixing_seed is None else self.mixing_seed
            a = _rng(seed, _MIXING).standard_normal((self.p, self.p))
        else:
            a = np.asarray(self.mixing, dtype=float)
            if a.shape != (self.p, self.p):
                raise DimensionError(f"mixing matrix must be {self.p}x{self.p}")
        if self.normalize:
            a = a / np.linalg.norm(a, 2)
        return a

    def entry_map(self):
        if self.kind == "sin_correlated":
            return np.sin
        fn = self.lipschitz_map
        return LIPSCHITZ_MAPS[fn] if isinstance(fn, str) else fn

    def signal(self):
        return np.full(self.p, float(self.signal_scale) / np.sqrt(self.p))


def _column(spec, a, fmap, seed, tag, index):
    g = _rng(seed, tag, index).standard_normal(spec.p)
    return g if a is None else fmap(a @ g)


def sample_column(spec, i, mixing=None):
    """Column ``i`` of ``Z``, reproduced bit-exactly in isolation."""
    if not 0 <= i < spec.n:
        raise DimensionError("column index out of range")
    a = spec.mixing_matrix() if mixing is None else mixing
    return _column(spec, a, spec.entry_map(), spec.seed, _COLUMN, i)


def sample_Z(spec):
    """The ``p x n`` matrix ``Z`` with independent columns."""
    a = spec.mixing_matrix()
    fmap = spec.entry_map() if a is not None else None
    z = np.empty((spec.p, spec.n))
    for i in range(spec.n):
        z[:, i] = _column(spec, a, fmap, spec.seed, _COLUMN, i)
    return z


def sample_tau(spec):
    """``n`` positive scalings drawn from ``spec.tau_law``.

    ``student_abs(nu)`` folds Student-t draws (absolute value); ``pareto(a)``
    is the classical Pareto law with unit scale.
    """
    law = spec.tau_law
    if law.name == "constant":
        return np.full(spec.n, law.param)
    rng = _rng(spec.seed, _TAU)
    if law.name == "student_abs":
        tau = np.abs(rng.standard_t(law.param, spec.n))
    else:
        tau = 1.0 + rng.pareto(law.param, spec.n)
    # an exact zero has probability zero but would break positivity
    return np.where(tau > 0, tau, np.finfo(float).tiny)


def assemble_dataset(Z, tau, m):
    """``X = Z diag(sqrt(tau)) + m 1^T``."""
    Z = np.asarray(Z, dtype=float)
    tau = np.asarray(tau, dtype=float)
    m = np.asarray(m, dtype=float)
    if Z.ndim != 2 or tau.shape != (Z.shape[1],) or m.shape != (Z.shape[0],):
        raise DimensionError(f"incompatible shapes Z{Z.shape}, tau{tau.shape}, m{m.shape}")
    if np.any(tau < 0):
        raise DomainError("tau must be non-negative")
    return Z * np.sqrt(tau)[None, :] + m[:, None]


def generate(spec):
    """``(X, Z, tau, m)`` for ``spec``."""
    z = sample_Z(spec)
    tau = sample_tau(spec)
    m = spec.signal()
    return assemble_dataset(z, tau, m), z, tau, m


@dataclass
class PopulationMoments:
    second_moment: np.ndarray
    mean: np.ndarray
    draws: int


def _moment_chunk(spec, a, fmap, seed, index, size):
    g = _rng(seed, _MOMENTS, index).standard_normal((spec.p, size))
    z = g if a is None else fmap(a @ g)
    return z @ z.T, z.sum(axis=1)


def estimate_population_moments(spec, draws=None, threads=1, seed=None):
    """Monte Carlo estimate of the shared ``C = E[z z^T]`` and ``mu = E[z]``.

    Draws are split into chunks of :data:`MOMENT_CHUNK` with their own
    substreams; partial sums are reduced in chunk order, so the result does
    not depend on ``threads``.  ``draws`` defaults to ``p**2``.
    """
    draws = spec.p ** 2 if draws is None else int(draws)
    if draws < 1:
        raise ConfigError("draws must be at least 1")
    seed = spec.seed if seed is None else seed
    a = spec.mixing_matrix()
    fmap = spec.entry_map() if a is not None else None
    sizes = [MOMENT_CHUNK] * (draws // MOMENT_CHUNK)
    if draws % MOMENT_CHUNK:
        sizes.append(draws % MOMENT_CHUNK)

    def work(k):
        return _moment_chunk(spec, a, fmap, seed, k, sizes[k])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, range(len(sizes))))
    else:
        parts = [work(k) for k in range(len(sizes))]
    c = np.zeros((spec.p, spec.p))
    mu = np.zeros(spec.p)
    for cc, mm in parts:
        c += cc
        mu += mm
    c /= draws
    return PopulationMoments(0.5 * (c + c.T), mu / draws, draws)


def sin_gaussian_moments(a):
    """Exact ``E[sin(w) sin(w)^T]`` for ``w ~ N(0, A A^T)``.

    For jointly Gaussian centred ``(w_a, w_b)``,
    ``E[sin w_a sin w_b] = exp(-(s_aa + s_bb)/2) sinh(s_ab)``, and
    ``E[sin w] = 0``.
    """
    a = np.asarray(a, dtype=float)
    s = a @ a.T
    d = np.diag(s)
    return np.exp(-0.5 * (d[:, None] + d[None, :])) * np.sinh(s)
