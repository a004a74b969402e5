"""Regularized robust scatter estimation.

The robust scatter matrix of a data matrix ``X = (x_1, ..., x_n)`` (columns
are samples) is

    C_hat = (1/n) X u(Delta_hat) X^T,
    Delta_hat_i = (1/n) x_i^T ((1/n) X u(Delta_hat) X^T + gamma I)^{-1} x_i,

i.e. ``Delta_hat`` is the fixed point of ``Delta -> I(X X^T, u(Delta))`` where

    Q_gamma(S, D) = ((1/n) sum_i D_i S_i + gamma I)^{-1},
    I(S, D)_i     = (1/n) tr(S_i Q_gamma(S, D)).

Rank-one families ``S_i = x_i x_i^T`` are never materialized: products go
through the ``n x n`` Gram matrix when ``n < p`` and through the ``p x p``
side otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import (DimensionError, DomainError, DivergenceError, EstimatorError,
                         MultiplicityError, NumericalError)
from .fixed_point import FixedPointProblem, solve
from .stable_metric import get_weight_function, verify_weight_admissibility

SYMMETRY_RTOL = 1e-10
MAX_CONDITION = 1e15


def _symmetrize(a, name="matrix"):
    a = np.asarray(a, dtype=float)
    scale = max(float(np.max(np.abs(a))), 1e-300)
    if float(np.max(np.abs(a - np.swapaxes(a, -1, -2)))) > SYMMETRY_RTOL * scale:
        raise DomainError(f"{name} is not symmetric")
    return 0.5 * (a + np.swapaxes(a, -1, -2))


class SymmetricFamily:
    """A family ``S_1, ..., S_n`` of symmetric ``p x p`` matrices.

    Build with :meth:`rank_one` (``S_i = x_i x_i^T`` from a ``p x n`` data
    matrix, stored as the data only) or :meth:`dense` (explicit members).
    """

    def __init__(self, data=None, members=None):
        if (data is None) == (members is None):
            raise ValueError("give exactly one of data or members")
        self._gram = None
        if data is not None:
            data = np.asarray(data, dtype=float)
            if data.ndim != 2:
                raise DimensionError("data must be a p x n matrix")
            if not np.all(np.isfinite(data)):
                raise DomainError("data has non-finite entries")
            self.data, self.members = data, None
            self.p, self.n = data.shape
        else:
            members = _symmetrize(members, "family member")
            if members.ndim != 3 or members.shape[1] != members.shape[2]:
                raise DimensionError("members must have shape (n, p, p)")
            self.data, self.members = None, members
            self.n, self.p = members.shape[:2]

    @classmethod
    def rank_one(cls, X):
        return cls(data=X)

    @classmethod
    def dense(cls, members):
        return cls(members=members)

    @property
    def is_rank_one(self):
        return self.data is not None

    @property
    def gram(self):
        """``X^T X / n`` for rank-one families (cached)."""
        if self._gram is None:
            self._gram = self.data.T @ self.data / self.n
        return self._gram

    def weighted_sum(self, delta):
        """``(1/n) sum_i delta_i S_i``."""
        if self.is_rank_one:
            return (self.data * delta) @ self.data.T / self.n
        return np.einsum("i,ijk->jk", delta, self.members) / self.n

    def traces(self, m):
        """``(tr(S_i M))_i``."""
        if self.is_rank_one:
            return np.einsum("ji,jk,ki->i", self.data, m, self.data)
        return np.einsum("ijk,kj->i", self.members, m)

    def sum_norm(self):
        """``(1/n) ||sum_i S_i||`` (spectral norm)."""
        if self.is_rank_one:
            small = self.gram if self.n <= self.p else self.data @ self.data.T / self.n
            return float(np.linalg.eigvalsh(small)[-1]) if small.size else 0.0
        return float(np.linalg.norm(self.members.sum(axis=0) / self.n, 2))


def as_family(S):
    """Coerce ``S`` into a :class:`SymmetricFamily`.

    A 2-D array is read as a ``p x n`` data matrix (rank-one family), a 3-D
    array as ``n`` explicit ``p x p`` members.
    """
    if isinstance(S, SymmetricFamily):
        return S
    S = np.asarray(S, dtype=float)
    if S.ndim == 2:
        return SymmetricFamily.rank_one(S)
    if S.ndim == 3:
        return SymmetricFamily.dense(S)
    raise DimensionError(f"cannot interpret array of shape {S.shape} as a symmetric family")


def _check_args(family, delta, gamma):
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    if delta.shape != (family.n,):
        raise DimensionError(f"expected {family.n} weights, got shape {delta.shape}")
    if not np.all(np.isfinite(delta)) or np.any(delta < 0):
        raise DomainError("weights must be finite and non-negative")
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    return delta, float(gamma)


def _guard_condition(family, delta, gamma):
    # B >= gamma I, so cond(B) <= 1 + tr((1/n) sum D_i S_i) / gamma
    if family.is_rank_one:
        total = float(np.dot(delta, np.diag(family.gram)))
    else:
        total = float(np.einsum("i,ijj->", delta, family.members)) / family.n
    if 1 + total / gamma > MAX_CONDITION:
        raise NumericalError(f"resolvent assembly too ill-conditioned (estimate {1 + total / gamma:.3g})")


def _gram_side(family, delta, gamma):
    # Woodbury on the n x n side: M = gamma I + D^1/2 K D^1/2
    root = np.sqrt(delta)
    m = gamma * np.eye(family.n) + root[:, None] * family.gram * root[None, :]
    return root, linalg.cho_factor(m, lower=True, check_finite=False)


def resolvent(S, delta, gamma):
    """``Q_gamma(S, delta) = ((1/n) sum_i delta_i S_i + gamma I)^{-1}``.

    Raises
    ------
    NumericalError
        When the assembly's condition estimate exceeds 1e15.
    """
    family = as_family(S)
    delta, gamma = _check_args(family, delta, gamma)
    _guard_condition(family, delta, gamma)
    if family.is_rank_one and family.n < family.p:
        root, chol = _gram_side(family, delta, gamma)
        xr = family.data * root
        q = (np.eye(family.p) - xr @ linalg.cho_solve(chol, xr.T) / family.n) / gamma
    else:
        b = family.weighted_sum(delta) + gamma * np.eye(family.p)
        q = linalg.cho_solve(linalg.cho_factor(b, lower=True, check_finite=False), np.eye(family.p))
    return 0.5 * (q + q.T)


def trace_map(S, delta, gamma):
    """``I(S, delta)_i = (1/n) tr(S_i Q_gamma(S, delta))``."""
    family = as_family(S)
    delta, gamma = _check_args(family, delta, gamma)
    _guard_condition(family, delta, gamma)
    if family.is_rank_one:
        if family.n <= family.p:
            k = family.gram
            root, chol = _gram_side(family, delta, gamma)
            r = root[:, None] * k
            return (np.diag(k) - np.sum(r * linalg.cho_solve(chol, r), axis=0)) / gamma
        x = family.data
        b = family.weighted_sum(delta) + gamma * np.eye(family.p)
        sol = linalg.cho_solve(linalg.cho_factor(b, lower=True, check_finite=False), x)
        return np.sum(x * sol, axis=0) / family.n
    return family.traces(resolvent(family, delta, gamma)) / family.n


def contraction_factor(S, delta, gamma):
    """``||I - gamma Q_gamma(S, delta)||``, the d_s Lipschitz factor of ``trace_map``.

    Equal to ``lmax / (lmax + gamma)`` with ``lmax`` the top eigenvalue of
    ``(1/n) sum_i delta_i S_i``.
    """
    family = as_family(S)
    delta, gamma = _check_args(family, delta, gamma)
    _guard_condition(family, delta, gamma)
    if family.is_rank_one and family.n <= family.p:
        root = np.sqrt(delta)
        small = root[:, None] * family.gram * root[None, :]
    else:
        small = family.weighted_sum(delta)
    lmax = max(float(np.linalg.eigvalsh(small)[-1]), 0.0)
    return lmax / (lmax + gamma)


@dataclass
class RobustEstimate:
    delta_hat: np.ndarray
    scatter: np.ndarray
    residual: float
    gamma: float
    contraction_bound: float
    iterations: int = 0
    converged: bool = True
    observed_rates: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    weights: Optional[np.ndarray] = field(default=None, repr=False)

    def d_hat(self, tau):
        """``Delta_hat / max(tau, 1)``, the rescaled weights that stay O(1)."""
        return self.delta_hat / np.maximum(np.asarray(tau, dtype=float), 1.0)


def solve_robust(X, u, gamma, tol=1e-13, max_iter=5000, init=None, check_admissible=True):
    """Solve the robust weight fixed point for a ``p x n`` data matrix.

    Parameters
    ----------
    X : array_like, shape (p, n)
        Data matrix with samples as columns.
    u : WeightFunction or str
        Weight map or registry spec such as ``"min_lin_inv(5)"``.
    gamma : float
        Regularization, ``gamma > 0``.
    tol : float
        Stopping tolerance on the semi-metric step.
    init : array_like, optional
        Starting weights; defaults to ``I(X X^T, u(1, ..., 1))``.

    Returns
    -------
    RobustEstimate
    """
    u = get_weight_function(u)
    if check_admissible:
        report = verify_weight_admissibility(u)
        if not (report.bounded and report.stable):
            raise DomainError(f"weight function {u.name} is not admissible: {report.describe()}")
    family = as_family(X)
    if not family.is_rank_one:
        raise DimensionError("solve_robust expects a p x n data matrix")
    if not gamma > 0:
        raise DomainError("gamma must be positive")

    def step(delta):
        return trace_map(family, u(delta), gamma)

    start = step(np.ones(family.n)) if init is None else init
    try:
        sol = solve(FixedPointProblem(step, start, tol=tol, max_iter=max_iter))
    except DivergenceError as err:
        raise EstimatorError("robust weight iteration diverged",
                             {"last_iterate": err.last_iterate, "iteration": err.iteration}) from err
    except DomainError as err:
        raise EstimatorError(f"invalid starting point: {err}") from err
    delta = sol.point
    weights = u(delta)
    residual = float(np.max(np.abs(delta - step(delta))))
    scatter = family.weighted_sum(weights)
    bound = 1 - gamma / (gamma + u.u_sup * family.sum_norm())
    return RobustEstimate(delta_hat=delta, scatter=0.5 * (scatter + scatter.T), residual=residual,
                          gamma=float(gamma), contraction_bound=bound, iterations=sol.iterations,
                          converged=sol.converged, observed_rates=sol.observed_rates, weights=weights)


def empirical_spectrum(scatter, drop_null=False, null_rtol=1e-10):
    """Sorted eigenvalues of a symmetric matrix.

    With ``drop_null`` eigenvalues below ``null_rtol * max|eig|`` are removed.
    """
    scatter = _symmetrize(scatter, "scatter")
    eig = np.linalg.eigvalsh(scatter)
    if drop_null and eig.size:
        eig = eig[eig > null_rtol * np.max(np.abs(eig))]
    return eig


def empirical_alignment(scatter, m):
    """``(v_max^T m)^2`` for the unit top eigenvector of ``scatter``."""
    scatter = _symmetrize(scatter, "scatter")
    m = np.asarray(m, dtype=float)
    if m.shape != (scatter.shape[0],):
        raise DimensionError("signal dimension does not match scatter")
    eig, vec = np.linalg.eigh(scatter)
    scale = max(float(np.max(np.abs(eig))), 1e-300)
    if eig.size > 1 and eig[-1] - eig[-2] <= 1e-12 * scale:
        raise MultiplicityError("top eigenvalue is not simple")
    return float(np.dot(vec[:, -1], m) ** 2)


class RobustScatter(TransformerMixin, BaseEstimator):
    """Regularized robust scatter estimator.

    Follows the scikit-learn convention of rows as samples: ``fit(X)`` with
    ``X`` of shape ``(n_samples, n_features)``.

    Parameters
    ----------
    weight : str or WeightFunction, default="min_lin_inv(5)"
    gamma : float, default=1.0
    tol : float, default=1e-13
    max_iter : int, default=5000

    Attributes
    ----------
    covariance_ : ndarray of shape (n_features, n_features)
        The robust scatter matrix.
    delta_ : ndarray of shape (n_samples,)
        Fixed-point weights of the training samples.
    sample_weights_ : ndarray of shape (n_samples,)
        ``u(delta_)``.
    """

    def __init__(self, weight="min_lin_inv(5)", gamma=1.0, tol=1e-13, max_iter=5000):
        self.weight = weight
        self.gamma = gamma
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        est = solve_robust(X.T, self.weight, self.gamma, tol=self.tol, max_iter=self.max_iter)
        if not est.converged:
            raise EstimatorError("robust weight iteration did not converge",
                                 {"iterations": est.iterations})
        self.estimate_ = est
        self.covariance_ = est.scatter
        self.delta_ = est.delta_hat
        self.sample_weights_ = est.weights
        self.n_iter_ = est.iterations
        self.n_samples_fit_ = X.shape[0]
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X):
        """``(1/n) x^T (C_hat + gamma I)^{-1} x`` for each row of ``X``."""
        check_is_fitted(self, "covariance_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError("feature count differs from fit")
        b = self.covariance_ + self.gamma * np.eye(self.n_features_in_)
        sol = linalg.cho_solve(linalg.cho_factor(b, lower=True), X.T)
        return np.sum(X.T * sol, axis=0) / self.n_samples_fit_

    def transform(self, X):
        """Rows rescaled by ``sqrt(u(score))``; on the training set this is ``X u(Delta_hat)^{1/2}``."""
        u = get_weight_function(self.weight)
        X = check_array(X, dtype=float)
        return X * np.sqrt(u(self.score_samples(X)))[:, None]

    def spectrum(self, drop_null=False):
        check_is_fitted(self, "covariance_")
        return empirical_spectrum(self.covariance_, drop_null=drop_null)
