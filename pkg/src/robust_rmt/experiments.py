"""End-to-end runs behind the command line: estimate, predict, compare, mc-study.

Every run writes comma-separated tables with a one-line header (floats with
17 significant digits) and a ``summary.json`` record.  Tables depend only on
the configuration, so repeated runs are byte-identical; run times live in the
summary only.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import datagen
from .deterministic import (PopulationModel, SpikeAbsentError, detect_isolated_eigenvalue,
                            ks_distance, predicted_alignment, predicted_cdf, predicted_density,
                            predicted_stieltjes, solve_tilde_D, solve_U)
from .estimator import empirical_alignment, empirical_spectrum, solve_robust
from .exceptions import ConfigError, NonConvergenceError
from .stable_metric import get_weight_function, verify_weight_admissibility


# Tables ----------------------------------------------------------------------

def format_float(x):
    return format(float(x), ".17g")


def write_table(path, header, columns):
    """Write equal-length ``columns`` under ``header``; integer columns stay integers."""
    cols = [np.asarray(c) for c in columns]
    lengths = {c.shape[0] for c in cols}
    if len(lengths) != 1:
        raise ValueError("columns differ in length")
    fmts = [(lambda v: str(int(v))) if np.issubdtype(c.dtype, np.integer) else format_float for c in cols]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(f(v) for f, v in zip(fmts, row)) + "\n")


def read_table(path, header=None):
    """Numeric comma-separated table; a non-numeric first line is treated as a header."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.strip().split(",") if v.strip()]
        skip = 0
    except ValueError:
        skip = 1
    return np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)


def git_blob_hash(content: bytes):
    """``git hash-object`` of ``content``."""
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


def input_hash(cfg):
    """Content hash over the canonical config text and every referenced input file.

    The output directory and the thread count do not change any result and are
    left out, so identical experiments share a hash.
    """
    parts = [replace(cfg, out="", threads=1).to_text().encode()]
    for key in ("data", "tau", "second_moment", "mean"):
        path = getattr(cfg, key)
        if path is not None:
            with open(path, "rb") as fh:
                parts.append(key.encode() + b"\0" + fh.read())
    if cfg.mixing != "random":
        with open(cfg.mixing, "rb") as fh:
            parts.append(b"mixing\0" + fh.read())
    return git_blob_hash(b"\0".join(parts))


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_ready(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def write_summary(path, record):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_json_ready(record), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class RunArtifacts:
    out: str
    files: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def table(self, name, header, columns):
        path = os.path.join(self.out, name)
        write_table(path, header, columns)
        self.files.append(name)

    def finish(self):
        self.summary["manifest"] = sorted(self.files + ["summary.json"])
        write_summary(os.path.join(self.out, "summary.json"), self.summary)
        self.files.append("summary.json")
        return self


def _start(cfg, command):
    os.makedirs(cfg.out, exist_ok=True)
    art = RunArtifacts(cfg.out)
    art.summary.update(command=command, config=cfg.to_dict(), input_hash=input_hash(cfg),
                       runtimes={})
    return art


# Data and population -------------------------------------------------------

def generator_spec(cfg, seed):
    mixing = cfg.mixing if cfg.mixing == "random" else read_table(cfg.mixing)
    return datagen.GeneratorSpec(
        kind=cfg.kind, p=cfg.p, n=cfg.n, mixing=mixing, normalize=cfg.normalize_mixing,
        tau_law=cfg.tau_law, signal_scale=cfg.signal_scale, seed=seed,
        mixing_seed=cfg.seed if cfg.mixing_seed is None else cfg.mixing_seed,
        lipschitz_map=cfg.lipschitz_map)


@dataclass
class Dataset:
    X: np.ndarray
    tau: Optional[np.ndarray]
    signal: np.ndarray
    seed: int


def load_dataset(cfg, seed):
    """Generated data for ``seed``, or the external table in ``cfg.data``."""
    if cfg.data is None:
        spec = generator_spec(cfg, seed)
        X, _, tau, m = datagen.generate(spec)
        return Dataset(X, tau, m, seed)
    X = read_table(cfg.data)
    p = X.shape[0]
    tau = None
    if cfg.tau is not None:
        tau = read_table(cfg.tau).ravel()
        if tau.size != X.shape[1]:
            raise ConfigError("tau table length differs from the number of data columns")
    m = np.full(p, cfg.signal_scale / np.sqrt(p))
    return Dataset(X, tau, m, seed)


def population_moments(cfg):
    """Shared ``(C, mu)`` of the latent vectors, never estimated from the analysed data."""
    if cfg.moments == "file":
        c = read_table(cfg.second_moment)
        mu = None if cfg.mean is None else read_table(cfg.mean).ravel()
        return c, mu
    spec = generator_spec(cfg, cfg.seed)
    if cfg.moments == "analytic":
        if cfg.kind == "gaussian":
            return np.eye(cfg.p), None
        return datagen.sin_gaussian_moments(spec.mixing_matrix()), None
    seed = cfg.seed if cfg.moment_seed is None else cfg.moment_seed
    mom = datagen.estimate_population_moments(spec, cfg.moment_draws, cfg.threads, seed=seed)
    return mom.second_moment, mom.mean


def trial_tau(cfg, seed):
    if cfg.data is not None:
        if cfg.tau is None:
            raise ConfigError("prediction from external data needs a tau table")
        return read_table(cfg.tau).ravel()
    return datagen.sample_tau(generator_spec(cfg, seed))


def density_grid(cfg, upper):
    hi = upper if cfg.grid_max is None else cfg.grid_max
    if cfg.grid_points == 1:
        return np.array([cfg.grid_min])
    if cfg.grid_scale == "log":
        return np.geomspace(cfg.grid_min, hi, cfg.grid_points)
    return np.linspace(cfg.grid_min, hi, cfg.grid_points)


def spectrum_upper_bound(model, weights):
    """A point to the right of the predicted spectrum."""
    c = model.second_moments
    top = np.linalg.eigvalsh(c)[-1] if c.ndim == 2 else max(np.linalg.eigvalsh(c)[:, -1])
    ratio = model.p / model.n
    bulk = float(np.mean(weights)) * top * (1 + np.sqrt(ratio)) ** 2
    spike = float(np.max(weights / model.tau)) * float(model.signal @ model.signal)
    return 1.5 * (bulk + spike) + 1e-12


def _eps(cfg, grid):
    return cfg.eps * grid if cfg.eps_mode == "relative" else np.full(grid.shape, cfg.eps)


# Runs ------------------------------------------------------------------------

def _timed(art, key, fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    art.summary["runtimes"][key] = time.perf_counter() - t0
    return out


def _estimate(cfg, u, data):
    est = solve_robust(data.X, u, cfg.effective_gamma)
    if not est.converged:
        raise NonConvergenceError("robust weight iteration hit max_iter", est)
    return est


def run_estimate(cfg):
    """Robust scatter of one data set: spectra of C_hat and of X X^T / n, weights."""
    cfg.validate("estimate")
    art = _start(cfg, "estimate")
    u = get_weight_function(cfg.weight)
    data = load_dataset(cfg, cfg.seed)
    est = _timed(art, "estimate", _estimate, cfg, u, data)
    p, n = data.X.shape
    eig = empirical_spectrum(est.scatter)
    sample = empirical_spectrum(data.X @ data.X.T / n)
    art.table("eigenvalues.csv", ["index", "value"], [np.arange(p), eig])
    art.table("sample_eigenvalues.csv", ["index", "value"], [np.arange(p), sample])
    cols = [np.arange(n), est.delta_hat, est.weights]
    header = ["index", "delta_hat", "weight"]
    if data.tau is not None:
        cols.append(est.d_hat(data.tau))
        header.append("d_hat")
    art.table("delta.csv", header, cols)
    art.summary.update(p=p, n=n, gamma=cfg.effective_gamma, residual=est.residual,
                       iterations=est.iterations, contraction_bound=est.contraction_bound)
    return art.finish()


@dataclass
class Prediction:
    model: PopulationModel
    U: np.ndarray
    tilde_D: Optional[np.ndarray]
    tilde_D_minus_m: np.ndarray
    grid: Optional[np.ndarray] = None
    density: object = None


def _predict(cfg, u, moments, tau, signal, upper=None, with_density=True):
    c, mu = moments
    model = PopulationModel(c, tau, cfg.effective_gamma, signal=signal, means=mu)
    d_free = solve_tilde_D(model, u, with_signal=False)
    weights = model.tau * u(model.split.tau_under * d_free)
    d_sig = None
    if cfg.with_signal:
        d_sig = solve_tilde_D(model, u, with_signal=True) if model.has_signal else d_free
    pred = Prediction(model, weights, d_sig, d_free)
    if with_density:
        upper = spectrum_upper_bound(model, weights) if upper is None else upper
        grid = density_grid(cfg, upper)
        pred.grid = grid
        pred.density = predicted_density(model, weights, grid, _eps(cfg, grid), drop_null=cfg.drop_null)
    return pred


def _check_prediction_weight(cfg):
    u = get_weight_function(cfg.weight)
    report = verify_weight_admissibility(u, prediction_mode=True)
    if not report.ok:
        raise ConfigError(f"weight {u.name} is not admissible for prediction: {report.describe()}")
    return u


def _write_prediction(art, pred):
    n = pred.U.size
    cols = [np.arange(n), pred.U, pred.tilde_D_minus_m]
    header = ["index", "U", "tilde_D_minus_m"]
    if pred.tilde_D is not None:
        cols.append(pred.tilde_D)
        header.append("tilde_D")
    art.table("weights.csv", header, cols)
    dens = pred.density
    art.table("density.csv", ["x", "density"], [dens.x, dens.density])
    art.table("stieltjes.csv", ["x", "eps", "re", "im"],
              [dens.x, dens.eps, dens.stieltjes.real, dens.stieltjes.imag])
    art.summary["density_integral"] = dens.integral
    art.summary["null_mass"] = dens.null_mass
    if dens.warning:
        art.summary["density_warning"] = dens.warning
    if pred.tilde_D is not None:
        art.summary["tilde_D_gap_sup"] = float(np.max(np.abs(pred.tilde_D - pred.tilde_D_minus_m)))


def run_predict(cfg):
    """Deterministic equivalents, predicted density and Stieltjes transform."""
    cfg.validate("predict")
    u = _check_prediction_weight(cfg)
    art = _start(cfg, "predict")
    moments = _timed(art, "moments", population_moments, cfg)
    tau = trial_tau(cfg, cfg.seed)
    p = moments[0].shape[0]
    signal = np.full(p, cfg.signal_scale / np.sqrt(p))
    pred = _timed(art, "predict", _predict, cfg, u, moments, tau, signal)
    _write_prediction(art, pred)
    art.summary.update(p=p, n=tau.size, gamma=cfg.effective_gamma)
    return art.finish()


def _trial(cfg, u, moments, k, with_density):
    seed = (cfg.seed + k) % 2 ** 64
    data = load_dataset(cfg, seed)
    est = _estimate(cfg, u, data)
    tau = data.tau if data.tau is not None else trial_tau(cfg, seed)
    eig = empirical_spectrum(est.scatter)
    upper = 1.5 * float(eig[-1]) if with_density else None
    pred = _predict(cfg, u, moments, tau, data.signal, upper=upper, with_density=with_density)
    z = cfg.z
    record = {"trial": k, "seed": seed}
    emp_tr = float(np.mean(1.0 / (eig + z)))
    record["trace_error"] = abs(emp_tr - predicted_stieltjes(pred.model, pred.U, z))
    target = pred.tilde_D if pred.tilde_D is not None else pred.tilde_D_minus_m
    record["d_sup_error"] = float(np.max(np.abs(est.d_hat(tau) - target)))
    if with_density:
        keep = empirical_spectrum(est.scatter, drop_null=cfg.drop_null and eig.size > data.X.shape[1])
        cdf = predicted_cdf(pred.grid, pred.density.density)
        record["ks"] = ks_distance(keep, pred.grid, cdf)
    if cfg.alignment:
        m = data.signal
        norm = float(np.linalg.norm(m))
        unit = m / norm if norm > 0 else m
        record["alignment_empirical"] = empirical_alignment(est.scatter, unit) if norm > 0 else 0.0
        try:
            contour = detect_isolated_eigenvalue(eig)
            # the residue is reported rather than enforced: at small p the
            # predicted spike can sit close to the circle
            result = predicted_alignment(pred.model, pred.U, unit, contour, tol_imag=np.inf)
            record["alignment_predicted"] = result.value
            record["alignment_imag_residue"] = result.imag_residue
            record["spike_isolated"] = True
        except SpikeAbsentError:
            record["alignment_predicted"] = 0.0
            record["alignment_imag_residue"] = 0.0
            record["spike_isolated"] = False
    return record, est, pred, eig


def _run_trials(cfg, u, moments, with_density):
    def work(k):
        return _trial(cfg, u, moments, k, with_density)

    if cfg.threads > 1 and cfg.trials > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(work, range(cfg.trials)))
    return [work(k) for k in range(cfg.trials)]


def _trial_table(art, records):
    keys = [k for k in records[0] if k != "spike_isolated"]
    cols = [np.asarray([r[k] for r in records]) for k in keys]
    cols = [c.astype(np.int64) if c.dtype.kind in "iu" else c.astype(float) for c in cols]
    art.table("trials.csv", keys, cols)
    stats = {}
    for key, col in zip(keys, cols):
        if key not in ("trial", "seed"):
            stats[key] = {"median": float(np.median(col)), "mean": float(np.mean(col)),
                          "max": float(np.max(col))}
    art.summary["trial_stats"] = stats


def run_compare(cfg):
    """Estimate and predict side by side over ``trials`` seeds ``seed, seed+1, ...``."""
    cfg.validate("compare")
    u = _check_prediction_weight(cfg)
    art = _start(cfg, "compare")
    moments = _timed(art, "moments", population_moments, cfg)
    results = _timed(art, "trials", _run_trials, cfg, u, moments, True)
    records = [r[0] for r in results]
    _, est, pred, eig = results[0]
    art.table("eigenvalues.csv", ["index", "value"], [np.arange(eig.size), eig])
    _write_prediction(art, pred)
    _trial_table(art, records)
    first = records[0]
    art.summary.update(p=eig.size, n=pred.U.size, gamma=cfg.effective_gamma, ks=first["ks"],
                       d_sup_error=first["d_sup_error"])
    if cfg.concentration_study:
        art.summary["trace_errors"] = [r["trace_error"] for r in records]
    if cfg.alignment:
        art.summary["alignment_empirical"] = first["alignment_empirical"]
        art.summary["alignment_predicted"] = first["alignment_predicted"]
        art.summary["alignment_imag_residue"] = first["alignment_imag_residue"]
        art.summary["spike_isolated"] = first["spike_isolated"]
    return art.finish()


def run_mc_study(cfg):
    """Monte Carlo study of the trace and weight errors (no density tables)."""
    cfg.validate("mc-study")
    u = _check_prediction_weight(cfg)
    art = _start(cfg, "mc-study")
    moments = _timed(art, "moments", population_moments, cfg)
    results = _timed(art, "trials", _run_trials, cfg, u, moments, False)
    records = [r[0] for r in results]
    _trial_table(art, records)
    art.summary["trace_errors"] = [r["trace_error"] for r in records]
    art.summary["median_trace_error"] = float(np.median(art.summary["trace_errors"]))
    return art.finish()


def run_check_weights(cfg):
    """Admissibility report of ``cfg.weight``; returns ``(artifacts, ok)``."""
    try:
        u = get_weight_function(cfg.weight)
    except KeyError as err:
        raise ConfigError(str(err)) from err
    report = verify_weight_admissibility(u, prediction_mode=True)
    os.makedirs(cfg.out, exist_ok=True)
    art = RunArtifacts(cfg.out)
    art.summary.update(command="check-weights", weight=u.name, bounded=report.bounded,
                       stable=report.stable, u_times_below_one=report.u_times_below_one,
                       admissible_for_estimation=report.bounded and report.stable,
                       admissible_for_prediction=report.ok, report=report.describe())
    return art.finish(), report.ok
