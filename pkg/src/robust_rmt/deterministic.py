"""Deterministic equivalents of the robust scatter matrix.

Notation (all diagonals stored as 1-D arrays):

* ``eta(x)`` solves ``eta = 1 / (1/x + u(eta))``;
* ``Lambda_z(D)`` solves ``Lambda_i = (1/n) tr(C_i Qt)`` with
  ``Qt = ((1/n) sum_j D_j C_j / (1 + D_j Lambda_j) + z I)^{-1}``;
* ``U = tau * u(eta(tau * Lambda_gamma(U)))`` predicts ``tau_i u(Delta_hat_i)``;
* with ``tau_under = max(tau, 1)``, ``tau_bar = min(tau, 1)`` and
  ``u_tau(D) = tau_under u(tau_under D)``, ``D_tilde`` solves
  ``D = eta(tau_under Lambda^{C_bar}_gamma(u_tau(D))) / tau_under`` and predicts
  ``Delta_hat / tau_under``.  Here ``C_bar_i`` is the second moment of
  ``x_i / sqrt(tau_under_i)``; dropping the signal gives ``tau_bar C_i`` and
  ``D_tilde_minus_m``.

The spectral Stieltjes transform uses the convention
``m(w) = (1/p) tr (C_hat - w I)^{-1}``, so ``Im m(w) > 0`` when ``Im w > 0``
and the density is ``Im m(x + i eps) / pi``.

Second-moment families come in two layouts.  A shared matrix ``C`` (the
experimental default) is diagonalized once and per-sample terms are low-rank
corrections in the signal/mean directions, so every resolvent costs ``O(p)``
after the eigendecomposition.  Per-sample ``C_i`` use dense ``p x p`` solves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .exceptions import (ContourQualityError, DimensionError, DivergenceError, DomainError,
                         NonConvergenceError, SpikeAbsentError)
from .fixed_point import FixedPointProblem, solve, solve_complex
from .stable_metric import WeightFunction, get_weight_function, verify_weight_admissibility

LAMBDA_TOL = 1e-15
OUTER_TOL = 1e-14


# Population model ----------------------------------------------------------

@dataclass(frozen=True)
class TauSplit:
    """``tau = tau_bar * tau_under`` with ``tau_under >= 1 >= tau_bar``."""

    tau_under: np.ndarray
    tau_bar: np.ndarray

    @classmethod
    def from_tau(cls, tau):
        tau = np.asarray(tau, dtype=float)
        return cls(np.maximum(tau, 1.0), np.minimum(tau, 1.0))

    @property
    def tau(self):
        return self.tau_under * self.tau_bar


def _check_psd(c, name):
    c = np.asarray(c, dtype=float)
    scale = max(float(np.max(np.abs(c))), 1e-300)
    if float(np.max(np.abs(c - np.swapaxes(c, -1, -2)))) > 1e-10 * scale:
        raise DomainError(f"{name} is not symmetric")
    c = 0.5 * (c + np.swapaxes(c, -1, -2))
    if np.min(np.linalg.eigvalsh(c)) < -1e-10 * scale:
        raise DomainError(f"{name} is not positive semi-definite")
    return c


@dataclass
class PopulationModel:
    """Second moments ``C_i = E[z_i z_i^T]``, scalings ``tau``, signal ``m`` and ``gamma``.

    ``second_moments`` is either one shared ``p x p`` matrix or an ``(n, p, p)``
    stack.  ``means`` (``E[z_i]``, shared ``(p,)`` or ``(n, p)``) only matters
    when the signal is non-zero.
    """

    second_moments: np.ndarray
    tau: np.ndarray
    gamma: float
    signal: Optional[np.ndarray] = None
    means: Optional[np.ndarray] = None
    trace_floor: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.second_moments, dtype=float)
        if c.ndim not in (2, 3) or c.shape[-1] != c.shape[-2]:
            raise DimensionError("second_moments must be (p, p) or (n, p, p)")
        self.second_moments = _check_psd(c, "second moment")
        self.tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        if self.tau.ndim != 1 or not np.all(np.isfinite(self.tau)) or np.any(self.tau <= 0):
            raise DomainError("tau must be a vector of positive finite reals")
        if c.ndim == 3 and c.shape[0] != self.tau.size:
            raise DimensionError("number of second moments differs from len(tau)")
        if not self.gamma > 0:
            raise DomainError("gamma must be positive")
        p = self.p
        self.signal = np.zeros(p) if self.signal is None else np.asarray(self.signal, dtype=float)
        if self.signal.shape != (p,):
            raise DimensionError("signal dimension differs from p")
        if self.means is not None:
            self.means = np.asarray(self.means, dtype=float)
            if self.means.shape not in ((p,), (self.n, p)):
                raise DimensionError("means must be (p,) or (n, p)")
        traces = (np.trace(c) if c.ndim == 2 else np.einsum("ijj->i", c)) / self.n
        if np.min(traces) < self.trace_floor:
            raise DomainError("(1/n) tr C_i falls below the declared floor")

    @property
    def p(self):
        return self.second_moments.shape[-1]

    @property
    def n(self):
        return self.tau.size

    @property
    def shared(self):
        return self.second_moments.ndim == 2 and (self.means is None or self.means.ndim == 1)

    @property
    def split(self):
        return TauSplit.from_tau(self.tau)

    @property
    def has_signal(self):
        return bool(np.any(self.signal != 0))

    def family(self, kind="plain"):
        """Second-moment family used by the fixed points.

        ``kind`` is one of

        * ``"plain"``: ``C_i``;
        * ``"barred"``: second moments of ``x_i / sqrt(tau_under_i)``;
        * ``"barred_free"``: ``tau_bar_i C_i`` (barred, signal removed);
        * ``"data"``: second moments of ``x_i`` itself.
        """
        n = self.n
        split = self.split
        if kind == "plain":
            a, rank_coef = np.ones(n), None
        elif kind == "barred_free":
            a, rank_coef = split.tau_bar, None
        elif kind == "barred":
            a = split.tau_bar
            rank_coef = (1.0 / split.tau_under, np.sqrt(split.tau_bar / split.tau_under))
        elif kind == "data":
            a = self.tau
            rank_coef = (np.ones(n), np.sqrt(self.tau))
        else:
            raise ValueError(f"unknown family kind {kind!r}")
        if rank_coef is not None and not self.has_signal:
            rank_coef = None
        if self.shared:
            return SharedFamily.build(self.second_moments, a, self.signal, self.means, rank_coef)
        return DenseFamily.build(self.second_moments, a, self.signal, self.means, rank_coef, n)


# Second-moment families ----------------------------------------------------

class SharedFamily:
    """``C_i = a_i C + F M_i F^T`` with ``C`` shared and ``F`` of low rank."""

    def __init__(self, c_eig, c_vec, a, factors=None, coefs=None):
        self.c, self.v, self.a = c_eig, c_vec, a
        self.factors, self.coefs = factors, coefs
        self.n, self.p = a.size, c_eig.size
        self.g = None if factors is None else c_vec.T @ factors

    @classmethod
    def build(cls, c, a, signal, means, rank_coef):
        c_eig, c_vec = np.linalg.eigh(c)
        c_eig = np.clip(c_eig, 0.0, None)
        if rank_coef is None:
            return cls(c_eig, c_vec, a)
        sig_coef, cross_coef = rank_coef
        if means is None or not np.any(means):
            factors = signal[:, None]
            coefs = sig_coef[:, None, None]
        else:
            factors = np.column_stack([signal, means])
            coefs = np.zeros((a.size, 2, 2))
            coefs[:, 0, 0] = sig_coef
            coefs[:, 0, 1] = coefs[:, 1, 0] = cross_coef
        return cls(c_eig, c_vec, a, factors, coefs)

    def traces(self):
        t = self.a * np.sum(self.c)
        if self.factors is not None:
            t = t + np.einsum("irs,sr->i", self.coefs, self.factors.T @ self.factors)
        return t

    def assemble(self, d, z):
        return _SharedResolvent(self, d, z)


class _SharedResolvent:
    def __init__(self, fam, d, z):
        n = fam.n
        self.fam = fam
        self.d0 = np.mean(d * fam.a) * fam.c + z
        if fam.factors is not None:
            mbar = np.einsum("i,irs->rs", d, fam.coefs) / n
            g = fam.g
            self.h = g.T @ (g / self.d0[:, None])
            r = mbar.shape[0]
            self.w = mbar @ np.linalg.inv(np.eye(r) + self.h @ mbar)

    def sample_traces(self):
        """``(1/n) tr(C_i Qt)`` for every sample."""
        fam = self.fam
        tc = np.sum(fam.c / self.d0)
        if fam.factors is None:
            return fam.a * tc / fam.n
        g = fam.g
        tc = tc - np.trace(self.w @ (g.T @ (g * (fam.c / self.d0 ** 2)[:, None])))
        fqf = self.h - self.h @ self.w @ self.h
        return (fam.a * tc + np.einsum("irs,sr->i", fam.coefs, fqf)) / fam.n

    def normalized_trace(self):
        t = np.sum(1.0 / self.d0)
        if self.fam.factors is not None:
            g = self.fam.g
            t = t - np.trace(self.w @ (g.T @ (g / self.d0[:, None] ** 2)))
        return t / self.fam.p

    def quad(self, vec):
        gv = self.fam.v.T @ vec
        out = np.sum(gv * gv / self.d0)
        if self.fam.factors is not None:
            h = self.fam.g.T @ (gv / self.d0)
            out = out - h @ self.w @ h
        return out

    def dense(self):
        v = self.fam.v
        q = (v / self.d0) @ v.T
        if self.fam.factors is not None:
            left = v @ (self.fam.g / self.d0[:, None])
            q = q - left @ self.w @ left.T
        return q


class DenseFamily:
    """Explicit per-sample second moments."""

    def __init__(self, members):
        self.members = members
        self.n, self.p = members.shape[:2]

    @classmethod
    def build(cls, c, a, signal, means, rank_coef, n):
        c = np.broadcast_to(c, (n,) + c.shape[-2:]) if c.ndim == 2 else c
        members = a[:, None, None] * c
        if rank_coef is not None:
            sig_coef, cross_coef = rank_coef
            members = members + sig_coef[:, None, None] * np.outer(signal, signal)[None]
            if means is not None:
                mu = np.broadcast_to(means, (n, signal.size))
                cross = mu[:, :, None] * signal[None, None, :]
                members = members + cross_coef[:, None, None] * (cross + np.swapaxes(cross, 1, 2))
        return cls(np.ascontiguousarray(members))

    def traces(self):
        return np.einsum("ijj->i", self.members)

    def assemble(self, d, z):
        return _DenseResolvent(self, d, z)


class _DenseResolvent:
    def __init__(self, fam, d, z):
        self.fam = fam
        b = np.einsum("i,ijk->jk", d, fam.members) / fam.n + z * np.eye(fam.p)
        self.q = np.linalg.inv(b)

    def sample_traces(self):
        return np.einsum("ijk,kj->i", self.fam.members, self.q) / self.fam.n

    def normalized_trace(self):
        return np.trace(self.q) / self.fam.p

    def quad(self, vec):
        return vec @ self.q @ vec

    def dense(self):
        return self.q


def _as_family(model, kind):
    if isinstance(model, (SharedFamily, DenseFamily)):
        return model
    return model.family(kind)


# eta -----------------------------------------------------------------------

def _require_admissible(u):
    report = verify_weight_admissibility(u)
    if not (report.bounded and report.stable):
        raise DomainError(f"weight function {u.name} is not admissible: {report.describe()}")


def eta(u, x, validate=True):
    """Solve ``eta = 1 / (1/x + u(eta))`` entrywise.

    A log-space bisection on the bracket ``[x / (1 + x u_sup), x]`` locates the
    root, then Picard iteration on ``e -> x / (1 + x u(e))`` polishes it.
    """
    u = get_weight_function(u)
    if validate:
        _require_admissible(u)
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if np.any(~(x > 0)) or not np.all(np.isfinite(x)):
        raise DomainError("eta is defined for positive finite x")

    def excess(e):
        return e * (1.0 / x + u(e)) - 1.0

    hi = x.copy()
    if math.isfinite(u.u_sup):
        lo = x / (1.0 + x * u.u_sup)
    else:
        lo = x / 2.0
        for _ in range(2000):
            bad = excess(lo) > 0
            if not np.any(bad):
                break
            lo = np.where(bad, lo / 2.0, lo)
    llo, lhi = np.log(lo), np.log(hi)
    for _ in range(200):
        mid = 0.5 * (llo + lhi)
        pos = excess(np.exp(mid)) > 0
        lhi = np.where(pos, mid, lhi)
        llo = np.where(pos, llo, mid)
        if np.max(lhi - llo) < 1e-15:
            break
    start = np.exp(0.5 * (llo + lhi))
    sol = solve(FixedPointProblem(lambda e: x / (1.0 + x * u(e)), start, tol=1e-15, max_iter=60))
    out = sol.point
    return float(out[0]) if scalar else out


def eta_residual(u, x, value):
    """``|eta (1/x + u(eta)) - 1|``."""
    u = get_weight_function(u)
    return np.abs(np.asarray(value) * (1.0 / np.asarray(x) + u(value)) - 1.0)


def eta_tau(u, split, x, validate=True):
    """``eta(tau_under x) / tau_under`` entrywise."""
    x = np.asarray(x, dtype=float)
    return eta(u, split.tau_under * x, validate=validate) / split.tau_under


def u_tau(u, split, d):
    """``tau_under u(tau_under d)``."""
    return split.tau_under * u(split.tau_under * np.asarray(d, dtype=float))


# Lambda fixed point --------------------------------------------------------

def _lambda_init(fam, z):
    return fam.traces() / fam.n / z


def lambda_fixed_point(model, delta, z, init=None, kind="plain", tol=LAMBDA_TOL, max_iter=20000,
                       damping=None):
    """Solve ``Lambda_i = (1/n) tr(C_i Qt)`` for weights ``delta`` at ``z``.

    Real positive ``z`` uses undamped Picard iteration in the stable
    semi-metric; complex ``z`` uses damped arithmetic iteration (default
    damping 0.5), warm-started from ``init`` when given.

    Raises
    ------
    NonConvergenceError
        If the iteration does not reach ``tol``.
    """
    fam = _as_family(model, kind)
    delta = np.asarray(delta)
    if delta.shape != (fam.n,):
        raise DimensionError(f"expected {fam.n} weights")
    real = np.isrealobj(delta) and np.isreal(z) and np.real(z) > 0
    if real:
        z = float(np.real(z))
        delta = np.asarray(delta, dtype=float)

        def step(lam):
            return fam.assemble(delta / (1.0 + delta * lam), z).sample_traces()

        start = _lambda_init(fam, z) if init is None else np.real(init)
        try:
            sol = solve(FixedPointProblem(step, start, tol=tol, max_iter=max_iter,
                                          damping=1.0 if damping is None else damping))
        except DivergenceError as err:
            raise NonConvergenceError(f"Lambda iteration diverged at z={z}", err) from err
        if not sol.converged:
            raise NonConvergenceError(f"Lambda iteration did not converge at z={z}", sol)
        return sol.point

    z = complex(z)
    if isinstance(fam, SharedFamily) and fam.factors is None:
        lam = _shared_scalar_newton(fam, delta, z, init)
        if lam is not None:
            return lam

    def cstep(lam):
        return fam.assemble(delta / (1.0 + delta * lam), z).sample_traces()

    start = _lambda_init(fam, z) if init is None else init
    try:
        sol = solve_complex(cstep, start, tol=tol * 10, max_iter=max_iter,
                            damping=0.5 if damping is None else damping)
    except DivergenceError as err:
        raise NonConvergenceError(f"Lambda iteration diverged at z={z}", err) from err
    if not sol.converged:
        raise NonConvergenceError(f"Lambda iteration did not converge at z={z}", sol)
    return sol.point


def _shared_scalar_newton(fam, delta, z, init, tol=1e-15, max_iter=100):
    """Newton's method on the scalar reduction of a shared-``C`` problem.

    With ``C_i = a_i C`` the solution is ``Lambda = a s``, where ``s`` solves
    ``s = (1/n) sum_k c_k / (A(s) c_k + z)`` with
    ``A(s) = mean(delta a / (1 + delta a s))`` and ``c_k`` the eigenvalues of
    ``C``.  Returns ``None`` when Newton fails or lands on a root with the
    wrong sign of ``Im s`` (the Stieltjes branch has ``Im s * Im z <= 0``);
    the caller then falls back to damped Picard iteration.
    """
    a, c, n = fam.a, fam.c, fam.n
    delta = np.asarray(delta, dtype=complex)
    if init is None:
        s = np.sum(c) / n / z
    else:
        init = np.asarray(init, dtype=complex)
        s = np.sum(init * a) / np.sum(a * a)
    for _ in range(max_iter):
        denom = 1.0 + delta * a * s
        big_a = np.mean(delta * a / denom)
        d_big_a = -np.mean((delta * a) ** 2 / denom ** 2)
        res = big_a * c + z
        g = np.sum(c / res) / n
        dg = -np.sum(c * c / res ** 2) / n * d_big_a
        step = (s - g) / (1.0 - dg)
        if not np.isfinite(step):
            return None
        s = s - step
        if abs(step) <= tol * max(abs(s), 1e-300):
            break
    else:
        return None
    if z.imag != 0 and s.imag * z.imag > 0:
        return None
    lam = a * s
    if np.max(np.abs(lam - fam.assemble(delta / (1.0 + delta * lam), z).sample_traces())) > 1e-11 * max(
            np.max(np.abs(lam)), 1.0):
        return None
    return lam


def lambda_residual(model, delta, lam, z, kind="plain"):
    fam = _as_family(model, kind)
    return np.abs(lam - fam.assemble(delta / (1.0 + delta * lam), z).sample_traces())


def deterministic_resolvent(model, delta, lam, z, kind="plain"):
    """``((1/n) sum_i delta_i C_i / (1 + delta_i Lambda_i) + z I)^{-1}`` as a dense matrix."""
    fam = _as_family(model, kind)
    delta = np.asarray(delta)
    q = fam.assemble(delta / (1.0 + delta * np.asarray(lam)), z).dense()
    return 0.5 * (q + q.T)


# D_tilde and U -------------------------------------------------------------

def _prediction_weight(u, validate):
    u = get_weight_function(u)
    if validate:
        report = verify_weight_admissibility(u, prediction_mode=True)
        if not report.ok:
            raise DomainError(f"weight function {u.name} is not admissible for prediction: "
                              f"{report.describe()}")
    return u


def tilde_D_map(model, u, with_signal=True, validate=True):
    """The self-map ``D -> eta_tau(Lambda^{C_bar}_gamma(u_tau(D)))``.

    The returned callable warm-starts its inner ``Lambda`` solve from the
    previous call.
    """
    u = _prediction_weight(u, validate)
    fam = model.family("barred" if with_signal else "barred_free")
    split, gamma = model.split, model.gamma
    state = {"lam": None}

    def step(d):
        delta = u_tau(u, split, d)
        lam = lambda_fixed_point(fam, delta, gamma, init=state["lam"])
        state["lam"] = lam
        return eta_tau(u, split, lam, validate=False)

    step.state = state
    return step


def solve_tilde_D(model, u, with_signal=True, tol=OUTER_TOL, max_iter=2000, validate=True):
    """``D_tilde`` (``with_signal=True``) or ``D_tilde_minus_m`` (``False``)."""
    step = tilde_D_map(model, u, with_signal, validate)
    start = step(np.ones(model.n))
    sol = solve(FixedPointProblem(step, start, tol=tol, max_iter=max_iter))
    if not sol.converged:
        raise NonConvergenceError("D_tilde iteration did not converge", sol)
    return sol.point


def tilde_D_bracket(model, u, with_signal=True):
    """Entrywise a-priori bounds ``(lower, upper)`` on ``D_tilde``.

    ``upper = (1/n) tr C_bar_i / gamma`` since ``eta(x) <= x`` and
    ``Qt <= I / gamma``.  ``lower`` combines ``eta(x) / x >= 1 - u_times_sup``
    with ``Qt >= I / (gamma + ||(1/n) sum_j tau_under_j u_sup C_bar_j||)``.
    """
    u = get_weight_function(u)
    fam = model.family("barred" if with_signal else "barred_free")
    split, gamma = model.split, model.gamma
    traces = fam.traces() / model.n
    weights = split.tau_under * u.u_sup
    if isinstance(fam, SharedFamily):
        total = fam.assemble(weights, 0.0).d0
        norm = float(np.max(total))
        if fam.factors is not None:
            norm += float(np.linalg.norm(fam.factors, 2) ** 2 * np.max(np.abs(
                np.einsum("i,irs->rs", weights, fam.coefs) / model.n)) * fam.factors.shape[1])
    else:
        norm = float(np.linalg.norm(np.einsum("i,ijk->jk", weights, fam.members) / model.n, 2))
    lower = (1 - u.u_times_sup) * traces / (gamma + norm)
    upper = traces / gamma
    return lower, upper


def u_fixed_point_map(model, u, validate=True):
    """The self-map ``U -> tau u(eta(tau Lambda_gamma(U)))``."""
    u = _prediction_weight(u, validate)
    fam = model.family("plain")
    tau, gamma = model.tau, model.gamma
    state = {"lam": None}

    def step(weights):
        lam = lambda_fixed_point(fam, weights, gamma, init=state["lam"])
        state["lam"] = lam
        return tau * u(eta(u, tau * lam, validate=False))

    step.state = state
    return step


def solve_U(model, u, route="direct", tol=OUTER_TOL, max_iter=2000, validate=True):
    """Deterministic weights ``U`` predicting ``tau_i u(Delta_hat_i)``.

    ``route="direct"`` iterates the ``U`` equation; ``route="via_tilde_D"``
    returns ``tau u(tau_under D_tilde_minus_m)``.  The two coincide.
    """
    u = _prediction_weight(u, validate)
    if route == "via_tilde_D":
        d = solve_tilde_D(model, u, with_signal=False, tol=tol, max_iter=max_iter, validate=False)
        return model.tau * u(model.split.tau_under * d)
    if route != "direct":
        raise ValueError(f"unknown route {route!r}")
    step = u_fixed_point_map(model, u, validate=False)
    start = step(model.tau * u(model.tau))
    sol = solve(FixedPointProblem(step, start, tol=tol, max_iter=max_iter))
    if not sol.converged:
        raise NonConvergenceError("U iteration did not converge", sol)
    return sol.point


# Stieltjes transform and density -------------------------------------------

def predicted_stieltjes(model, weights, z, init=None, return_lambda=False):
    """``(1/p) tr Qt_z(U)``, the prediction of ``(1/p) tr (C_hat + z I)^{-1}``.

    Real for real ``z > 0``; complex otherwise.
    """
    fam = _as_family(model, "plain")
    weights = np.asarray(weights, dtype=float)
    lam = lambda_fixed_point(fam, weights, z, init=init)
    val = fam.assemble(weights / (1.0 + weights * lam), z).normalized_trace()
    val = float(np.real(val)) if np.isrealobj(lam) else complex(val)
    return (val, lam) if return_lambda else val


def spectral_stieltjes(model, weights, w, init=None, return_lambda=False):
    """``m(w) = (1/p) tr (C_hat - w I)^{-1}`` predicted; equals ``predicted_stieltjes`` at ``-w``."""
    return predicted_stieltjes(model, weights, -w, init=init, return_lambda=return_lambda)


def _continuation_start(fam, weights, w, start_imag):
    # walk the imaginary part of w down from start_imag to Im w
    lam = None
    for im in np.geomspace(start_imag, w.imag, 12)[:-1]:
        zz = -(w.real + 1j * im)
        lam = lambda_fixed_point(fam, weights, zz, init=lam)
    return lam


@dataclass
class DensityResult:
    x: np.ndarray
    density: np.ndarray
    stieltjes: np.ndarray
    eps: np.ndarray
    integral: float
    null_mass: float = 0.0
    warning: Optional[str] = None


def predicted_density(model, weights, grid, eps, drop_null=False):
    """Density ``Im m(x + i eps) / pi`` over ``grid``, clipped at zero.

    ``eps`` is a scalar or one value per grid point; spectra spanning several
    decades are best resolved on a log grid with ``eps`` proportional to ``x``.

    The grid is swept from its right end with warm-started ``Lambda``.  With
    ``drop_null`` and ``p > n`` the atom of mass ``1 - n/p`` at the origin is
    subtracted from ``m`` and the remainder renormalized.
    """
    fam = _as_family(model, "plain")
    weights = np.asarray(weights, dtype=float)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    eps_arr = np.broadcast_to(np.asarray(eps, dtype=float), grid.shape)
    if not np.all(eps_arr > 0):
        raise DomainError("eps must be positive")
    order = np.argsort(grid)[::-1]
    span = max(float(np.ptp(grid)), 1.0)
    values = np.empty(grid.size, dtype=complex)
    lam = None
    for k, idx in enumerate(order):
        w = complex(grid[idx], eps_arr[idx])
        if k == 0:
            lam = _continuation_start(fam, weights, w, max(span, 10 * eps_arr[idx]))
        val, lam = spectral_stieltjes(fam, weights, w, init=lam, return_lambda=True)
        values[idx] = val
    null_mass = 0.0
    if drop_null and fam.p > fam.n:
        null_mass = 1.0 - fam.n / fam.p
        values = (values + null_mass / (grid + 1j * eps_arr)) / (1.0 - null_mass)
    density = np.clip(values.imag / np.pi, 0.0, None)
    integral = float(integrate.trapezoid(density, grid)) if grid.size > 1 else float("nan")
    warning = None
    if grid.size > 1 and abs(integral - 1.0) > 0.1:
        warning = f"density integrates to {integral:.4f} over the grid; grid may be too coarse or narrow"
    return DensityResult(grid, density, values, eps_arr.copy(), integral, null_mass, warning)


def predicted_cdf(x, density):
    """Cumulative trapezoid of ``density`` normalized to end at one."""
    cdf = integrate.cumulative_trapezoid(density, x, initial=0.0)
    return cdf / cdf[-1] if cdf[-1] > 0 else cdf


def ks_distance(eigenvalues, x, cdf):
    """Sup distance between the empirical CDF of ``eigenvalues`` and a gridded CDF."""
    eig = np.sort(np.asarray(eigenvalues, dtype=float))
    k = eig.size
    pred = np.interp(eig, x, cdf, left=0.0, right=1.0)
    upper = np.arange(1, k + 1) / k
    lower = np.arange(0, k) / k
    return float(max(np.max(np.abs(upper - pred)), np.max(np.abs(pred - lower))))


# Alignment -----------------------------------------------------------------

@dataclass(frozen=True)
class ContourSpec:
    center: float
    radius: float
    nodes: int = 256

    def points(self):
        # half-step offset keeps nodes off the real axis
        theta = 2 * np.pi * (np.arange(self.nodes) + 0.5) / self.nodes
        return theta, self.center + self.radius * np.exp(1j * theta)


def detect_isolated_eigenvalue(eigenvalues, factor=5.0, window=10, bulk_edge=None, nodes=256):
    """Contour around the top eigenvalue when it is isolated from the rest.

    The top eigenvalue is isolated when its gap to the next one exceeds
    ``factor`` times the median of the ``window`` spacings just below it
    (and, if given, it lies beyond the predicted ``bulk_edge``).  The local
    window matters: spacings near a soft edge are much larger than inside
    the bulk.  The contour is centred on the eigenvalue with radius half the
    gap.
    """
    eig = np.sort(np.asarray(eigenvalues, dtype=float))
    if eig.size < 3:
        raise SpikeAbsentError("need at least three eigenvalues to detect a spike")
    spacing = np.diff(eig)
    gap = spacing[-1]
    local = float(np.median(spacing[-1 - window:-1]))
    if gap <= factor * local or (bulk_edge is not None and eig[-1] <= bulk_edge):
        raise SpikeAbsentError(f"top gap {gap:.4g} is not isolated (local spacing {local:.4g})")
    return ContourSpec(float(eig[-1]), float(gap / 2), nodes)


@dataclass
class AlignmentResult:
    value: float
    imag_residue: float
    contour: ContourSpec


def predicted_alignment(model, weights, m, contour, tol_imag=1e-3):
    """``-(1/2 pi i) \\oint m^T Qt(w) m dw`` around ``contour``.

    ``Qt(w)`` is the deterministic equivalent of ``(C_hat - w I)^{-1}`` built
    from the second moments of the observed ``x_i`` (signal included) with
    sample weights ``U_i / tau_i`` and denominators ``1 + U_i Lambda_i`` taken
    from the signal-free ``Lambda_{-w}(U)``.  Trapezoid quadrature on the
    circle; the real part is returned.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (model.p,):
        raise DimensionError("alignment vector has wrong dimension")
    weights = np.asarray(weights, dtype=float)
    if not np.any(m):
        return AlignmentResult(0.0, 0.0, contour)
    plain = model.family("plain")
    data = model.family("data")
    sample_w = weights / model.tau
    theta, pts = contour.points()
    lam = _continuation_start(plain, weights, pts[0], 4 * contour.radius + abs(pts[0].imag))
    vals = np.empty(pts.size, dtype=complex)
    for k, w in enumerate(pts):
        lam = lambda_fixed_point(plain, weights, -w, init=lam)
        vals[k] = data.assemble(sample_w / (1.0 + weights * lam), -w).quad(m)
    integral = -np.mean(vals * contour.radius * np.exp(1j * theta))
    result = AlignmentResult(float(integral.real), float(abs(integral.imag)), contour)
    if result.imag_residue > tol_imag:
        raise ContourQualityError(f"imaginary residue {result.imag_residue:.3g} exceeds {tol_imag}")
    return result


# Bundled prediction --------------------------------------------------------

@dataclass
class SpectralPrediction:
    U: np.ndarray
    tilde_D: np.ndarray
    tilde_D_minus_m: np.ndarray
    lambda_at: Callable = field(repr=False)
    stieltjes_samples: list = field(default_factory=list, repr=False)
    density_samples: list = field(default_factory=list, repr=False)
    predicted_alignment: Optional[float] = None


def predict(model, u, grid=None, eps=None, drop_null=False, alignment_contour=None):
    """Solve every deterministic object for ``model`` and sample the density."""
    u = _prediction_weight(u, True)
    d_free = solve_tilde_D(model, u, with_signal=False, validate=False)
    d_sig = solve_tilde_D(model, u, with_signal=True, validate=False) if model.has_signal else d_free
    weights = model.tau * u(model.split.tau_under * d_free)

    def lambda_at(z):
        return lambda_fixed_point(model, weights, z)

    pred = SpectralPrediction(weights, d_sig, d_free, lambda_at)
    if grid is not None:
        dens = predicted_density(model, weights, grid, eps, drop_null=drop_null)
        pred.stieltjes_samples = [(float(x), float(e), complex(s)) for x, e, s in zip(dens.x, dens.eps, dens.stieltjes)]
        pred.density_samples = [(float(x), float(d)) for x, d in zip(dens.x, dens.density)]
    if alignment_contour is not None and model.has_signal:
        pred.predicted_alignment = predicted_alignment(model, weights, model.signal,
                                                       alignment_contour).value
    return pred


class DeterministicEquivalent:
    """Estimator-style wrapper around the deterministic equivalents.

    ``fit(C, tau, signal=None, means=None)`` solves ``U``, ``D_tilde`` and
    ``D_tilde_minus_m``; the fitted object evaluates Stieltjes transforms,
    densities and alignments.
    """

    def __init__(self, weight="min_lin_inv(5)", gamma=1.0):
        self.weight = weight
        self.gamma = gamma

    def get_params(self, deep=True):
        return {"weight": self.weight, "gamma": self.gamma}

    def set_params(self, **params):
        for key, value in params.items():
            setattr(self, key, value)
        return self

    def fit(self, C, tau, signal=None, means=None):
        self.model_ = PopulationModel(C, tau, self.gamma, signal=signal, means=means)
        pred = predict(self.model_, self.weight)
        self.U_ = pred.U
        self.tilde_D_ = pred.tilde_D
        self.tilde_D_minus_m_ = pred.tilde_D_minus_m
        return self

    def stieltjes(self, z):
        return predicted_stieltjes(self.model_, self.U_, z)

    def density(self, grid, eps, drop_null=False):
        return predicted_density(self.model_, self.U_, grid, eps, drop_null=drop_null)

    def alignment(self, contour, m=None):
        m = self.model_.signal if m is None else m
        return predicted_alignment(self.model_, self.U_, m, contour)
