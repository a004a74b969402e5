"""Flat ``key = value`` experiment configuration.

Blank lines are ignored and ``#`` starts a comment that runs to the end of
the line.  Every key must be one of :data:`KEYS`; unknown keys, unparsable
values and failed invariants raise :class:`~robust_rmt.exceptions.ConfigError`.

Keys
----
kind              gaussian | sin_correlated | custom_lipschitz (default gaussian)
p, n              dimensions (required unless ``data`` is given)
data              path to a p x n comma-separated table (columns are samples)
mixing            random | path to a p x p table (default random)
normalize_mixing  true | false: rescale the mixing matrix to unit norm (default true)
mixing_seed       seed of the random mixing matrix (default: ``seed``)
lipschitz_map     sin | tanh | identity for custom_lipschitz (default tanh)
tau_law           constant(c) | student_abs(nu) | pareto(a) (default constant(1))
tau               path to a table of n scalings (with ``data``)
signal_scale      m = signal_scale * 1 / sqrt(p) (default 0)
moments           monte_carlo | analytic | file (default monte_carlo)
moment_draws      Monte Carlo draws (default p^2)
moment_seed       seed of the Monte Carlo draws (default: ``seed``; the draws use
                  their own substream, independent of the data columns)
second_moment     path to a p x p table (moments = file)
mean              path to a length-p table (moments = file, optional)
weight            registry spec (default min_lin_inv(5))
gamma             regularization; required by compare and mc-study
grid_min, grid_max, grid_points, grid_scale
                  density grid; grid_max may be ``auto`` (default 1e-6, auto, 400, log)
eps, eps_mode     imaginary offset; relative means eps * x (default 0.01, relative)
drop_null         remove the null atom when p > n (default true)
z                 evaluation point of the trace errors (default 1)
trials            Monte Carlo trials (default 1)
seed              base seed (default 0)
threads           worker threads (default 1)
out               output directory (default out)
with_signal       report D_tilde and its gap to the signal-free D_tilde (default true)
alignment         compute empirical and predicted alignment (default false)
concentration_study
                  report per-trial trace errors (default false)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

from .datagen import KINDS, LIPSCHITZ_MAPS, TauLaw
from .exceptions import ConfigError
from .stable_metric import get_weight_function


@dataclass
class ExperimentConfig:
    kind: str = "gaussian"
    p: Optional[int] = None
    n: Optional[int] = None
    data: Optional[str] = None
    mixing: str = "random"
    normalize_mixing: bool = True
    mixing_seed: Optional[int] = None
    lipschitz_map: str = "tanh"
    tau_law: str = "constant(1)"
    tau: Optional[str] = None
    signal_scale: float = 0.0
    moments: str = "monte_carlo"
    moment_draws: Optional[int] = None
    moment_seed: Optional[int] = None
    second_moment: Optional[str] = None
    mean: Optional[str] = None
    weight: str = "min_lin_inv(5)"
    gamma: Optional[float] = None
    grid_min: float = 1e-6
    grid_max: Optional[float] = None
    grid_points: int = 400
    grid_scale: str = "log"
    eps: float = 0.01
    eps_mode: str = "relative"
    drop_null: bool = True
    z: float = 1.0
    trials: int = 1
    seed: int = 0
    threads: int = 1
    out: str = "out"
    with_signal: bool = True
    alignment: bool = False
    concentration_study: bool = False

    def validate(self, mode=None):
        """Check invariants; ``mode`` adds the subcommand-specific requirements."""
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}")
        if self.data is None:
            if self.p is None or self.n is None:
                raise ConfigError("p and n are required when no data file is given")
            if self.p < 1 or self.n < 1:
                raise ConfigError("p and n must be positive")
        TauLaw.parse(self.tau_law)
        if self.lipschitz_map not in LIPSCHITZ_MAPS:
            raise ConfigError(f"lipschitz_map must be one of {sorted(LIPSCHITZ_MAPS)}")
        if self.moments not in ("monte_carlo", "analytic", "file"):
            raise ConfigError("moments must be monte_carlo, analytic or file")
        if self.moments == "analytic" and self.kind == "custom_lipschitz":
            raise ConfigError("analytic moments exist for gaussian and sin_correlated data only")
        if self.moments == "file" and self.second_moment is None:
            raise ConfigError("moments = file needs second_moment")
        if self.data is not None and self.moments != "file" and mode in ("predict", "compare", "mc-study"):
            # moments are never estimated from the data being analysed
            raise ConfigError("external data needs moments = file")
        if self.moment_draws is not None and self.moment_draws < 1:
            raise ConfigError("moment_draws must be at least 1")
        try:
            get_weight_function(self.weight)
        except (KeyError, ValueError) as err:
            raise ConfigError(str(err)) from err
        if self.gamma is None:
            if mode in ("compare", "mc-study"):
                raise ConfigError("gamma is required for compare and mc-study")
        elif not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ConfigError("gamma must be a positive real")
        if self.grid_points < 1:
            raise ConfigError("the density grid must be nonempty")
        if self.grid_scale not in ("log", "linear"):
            raise ConfigError("grid_scale must be log or linear")
        if self.grid_scale == "log" and not self.grid_min > 0:
            raise ConfigError("a log grid needs grid_min > 0")
        if self.grid_max is not None and self.grid_points > 1 and not self.grid_max > self.grid_min:
            raise ConfigError("grid_max must exceed grid_min")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.eps_mode not in ("absolute", "relative"):
            raise ConfigError("eps_mode must be absolute or relative")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return self

    @property
    def effective_gamma(self):
        return 1.0 if self.gamma is None else self.gamma

    def to_dict(self):
        return asdict(self)

    def to_text(self):
        """Canonical serialization; parsing it gives back an equal config."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            lines.append(f"{f.name} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
KEYS = tuple(_TYPES)


def _parse_value(key, raw):
    kind = _TYPES[key]
    raw = raw.strip()
    if key == "grid_max" and raw == "auto":
        return None
    try:
        if "bool" in kind:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {raw!r}") from err
    return raw


def parse_config(text, overrides=None):
    """Build an :class:`ExperimentConfig` from ``key = value`` text."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        # no value contains '#', so everything after it is a comment
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return ExperimentConfig(**values)


def load_config(path, overrides=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)
