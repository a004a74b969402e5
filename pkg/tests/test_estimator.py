import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from robust_rmt.estimator import (RobustScatter, SymmetricFamily, contraction_factor,
                                  empirical_alignment, empirical_spectrum, resolvent, solve_robust,
                                  trace_map)
from robust_rmt.exceptions import (DimensionError, DomainError, MultiplicityError, NumericalError)
from robust_rmt.stable_metric import constant, get_weight_function, stable_distance

U5 = get_weight_function("min_lin_inv(5)")


def dense_oracle(members, delta, gamma):
    n, p = members.shape[:2]
    b = np.einsum("i,ijk->jk", delta, members) / n + gamma * np.eye(p)
    q = np.linalg.inv(b)
    return q, np.einsum("ijk,kj->i", members, q) / n


def rank_one_members(X):
    return np.einsum("ji,ki->ijk", X, X)


def delta_hat_scalar_oracle(a=5.0):
    # delta (1 + u(delta)) = 1 for x = 1, gamma = 1, branch by branch
    roots = []
    lin = (-1 + math.sqrt(5)) / 2  # delta + delta^2 = 1 on the branch u(t) = t
    if lin <= (math.sqrt(1 + 4 * a) - 1) / (2 * a):
        roots.append(lin)
    # delta (1 + 1/(1 + a delta)) = 1  <=>  a delta^2 + (2 - a) delta - 1 = 0
    disc = (2 - a) ** 2 + 4 * a
    inv = ((a - 2) + math.sqrt(disc)) / (2 * a)
    if inv >= (math.sqrt(1 + 4 * a) - 1) / (2 * a):
        roots.append(inv)
    assert len(roots) == 1
    return roots[0]


def test_scalar_cases():
    assert resolvent(np.ones((1, 1)), [2.0], 1.0)[0, 0] == pytest.approx(1 / 3)
    assert trace_map(np.ones((1, 1)), [0.7], 2.0)[0] == pytest.approx(1 / 2.7)
    q = resolvent(np.zeros((4, 3)), np.ones(3), 2.0)
    assert np.allclose(q, np.eye(4) / 2)
    assert contraction_factor(np.zeros((4, 3)), np.ones(3), 1.0) == 0.0


def test_delta_hat_scalar():
    est = solve_robust(np.ones((1, 1)), U5, 1.0)
    assert delta_hat_scalar_oracle() == pytest.approx((3 + math.sqrt(29)) / 10, abs=1e-15)
    assert est.delta_hat[0] == pytest.approx((3 + math.sqrt(29)) / 10, abs=1e-12)


@pytest.mark.parametrize("shape", [(6, 9), (9, 6), (5, 5)])
def test_oracle_equivalence(rng, shape):
    for _ in range(20):
        X = rng.standard_normal(shape)
        delta = rng.uniform(0.01, 3.0, shape[1])
        gamma = rng.uniform(0.1, 2.0)
        members = rank_one_members(X)
        q_ref, t_ref = dense_oracle(members, delta, gamma)
        assert np.max(np.abs(resolvent(X, delta, gamma) - q_ref)) <= 1e-10
        assert np.max(np.abs(trace_map(X, delta, gamma) - t_ref)) <= 1e-10
        assert np.max(np.abs(trace_map(members, delta, gamma) - t_ref)) <= 1e-10


def test_trace_map_bound(rng):
    X = rng.standard_normal((7, 4))
    gamma = 0.5
    out = trace_map(X, rng.uniform(0.1, 2, 4), gamma)
    assert np.all(out > 0)
    assert np.all(out <= np.sum(X ** 2, axis=0) / (4 * gamma) + 1e-15)


def test_contraction_factor_commuting_case():
    p, n, d, gamma = 3, 4, 0.8, 1.5
    members = np.broadcast_to(np.eye(p), (n, p, p)).copy()
    assert contraction_factor(members, np.full(n, d), gamma) == pytest.approx(d / (d + gamma))


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_resolvent_bounds(p, n, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((p, n)) * rng.uniform(0.1, 3)
    delta = rng.uniform(0.01, 5, n)
    gamma = rng.uniform(0.05, 3)
    q = resolvent(X, delta, gamma)
    assert np.linalg.norm(q, 2) <= 1 / gamma * (1 + 1e-10)
    assert np.linalg.norm(q @ X * np.sqrt(delta) / np.sqrt(n), 2) <= 1 / math.sqrt(gamma) * (1 + 1e-10)
    assert np.linalg.norm(q @ (X * delta) @ X.T / n, 2) <= 1 + 1e-10


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_trace_map_contraction(p, n, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((p, n))
    gamma = rng.uniform(0.05, 3)
    d1, d2 = rng.uniform(0.01, 5, n), rng.uniform(0.01, 5, n)
    lhs = stable_distance(trace_map(X, d1, gamma), trace_map(X, d2, gamma))
    phi = max(contraction_factor(X, d1, gamma), contraction_factor(X, d2, gamma))
    assert lhs <= phi * stable_distance(d1, d2) * (1 + 1e-10) + 1e-12


def test_contraction_factor_bound(rng):
    X = rng.standard_normal((5, 7))
    f0, gamma = 0.4, 0.7
    delta = rng.uniform(0.01, f0, 7)
    norm = np.linalg.norm(X @ X.T / 7, 2)
    assert contraction_factor(X, delta, gamma) <= f0 * norm / (f0 * norm + gamma) + 1e-12


def test_ill_conditioned_assembly():
    with pytest.raises(NumericalError):
        resolvent(np.ones((2, 1)) * 1e8, [1.0], 1e-3)


def test_argument_errors():
    with pytest.raises(DimensionError):
        resolvent(np.ones((2, 3)), [1.0, 1.0], 1.0)
    with pytest.raises(DomainError):
        resolvent(np.ones((2, 3)), [1.0, 1.0, 1.0], 0.0)
    with pytest.raises(DomainError):
        SymmetricFamily.dense(np.array([[[1.0, 2.0], [0.0, 1.0]]]))


@pytest.mark.parametrize("shape", [(20, 30), (30, 20)])
def test_solve_robust_contracts(rng, shape):
    X = rng.standard_normal(shape) * np.sqrt(rng.standard_cauchy(shape[1]) ** 2)
    est = solve_robust(X, U5, 1.0)
    assert est.converged and est.residual <= 1e-10
    assert np.max(np.abs(est.delta_hat - trace_map(X, U5(est.delta_hat), 1.0))) <= 1e-10
    assert np.allclose(est.scatter, (X * U5(est.delta_hat)) @ X.T / shape[1], atol=1e-14)
    assert np.min(np.linalg.eigvalsh(est.scatter)) >= -1e-10 * np.max(np.abs(est.scatter))
    assert np.all(est.observed_rates <= est.contraction_bound + 1e-9)
    for _ in range(3):
        other = solve_robust(X, U5, 1.0, init=rng.uniform(0.01, 10, shape[1]))
        assert np.max(np.abs(other.delta_hat - est.delta_hat)) <= 1e-8


def test_permutation_invariance(rng):
    X = rng.standard_normal((10, 14))
    perm = rng.permutation(14)
    a = solve_robust(X, U5, 0.5)
    b = solve_robust(X[:, perm], U5, 0.5)
    assert np.allclose(a.scatter, b.scatter, atol=1e-12)
    assert np.allclose(a.delta_hat[perm], b.delta_hat, atol=1e-12)


def test_constant_weight_gives_psd(rng):
    X = 3.0 * rng.standard_normal((6, 4))
    est = solve_robust(X, constant(1.0), 1.0)
    assert np.allclose(est.scatter, X @ X.T / 4)


def test_inadmissible_weight_rejected():
    with pytest.raises(DomainError):
        solve_robust(np.ones((2, 2)), "tent_max", 1.0)


def test_spectrum_and_alignment(rng):
    assert np.allclose(empirical_spectrum(np.eye(3)), 1)
    assert np.allclose(empirical_spectrum(np.diag([3.0, 1.0, 2.0])), [1, 2, 3])
    a = rng.standard_normal((8, 8))
    a = a + a.T
    vals = empirical_spectrum(a)
    _, vecs = np.linalg.eigh(a)
    assert np.allclose((vecs * vals) @ vecs.T, a, atol=1e-10)
    assert empirical_spectrum(np.diag([0.0, 1.0, 2.0]), drop_null=True).size == 2
    with pytest.raises(DomainError):
        empirical_spectrum(np.array([[1.0, 2.0], [0.0, 1.0]]))

    m = np.ones(5) / math.sqrt(5)
    noise = rng.standard_normal((5, 5)) * 1e-3
    assert empirical_alignment(np.outer(m, m) + noise @ noise.T, m) == pytest.approx(1, abs=1e-4)
    assert empirical_alignment(np.diag([1.0, 2.0, 3.0]), np.array([1.0, 1.0, 0.0])) == 0.0
    with pytest.raises(MultiplicityError):
        empirical_alignment(np.eye(3), np.ones(3))
    s = a @ a.T
    top = np.linalg.eigh(s)[1][:, -1]
    v = rng.standard_normal(8)
    assert empirical_alignment(s, v) == pytest.approx((top @ v) ** 2, abs=1e-10)


def test_sklearn_estimator(rng):
    X = rng.standard_normal((40, 6))
    model = RobustScatter(gamma=0.5).fit(X)
    est = solve_robust(X.T, U5, 0.5)
    assert np.allclose(model.covariance_, est.scatter)
    assert np.allclose(model.score_samples(X), est.delta_hat, atol=1e-10)
    assert np.allclose(model.transform(X), X * np.sqrt(est.weights)[:, None], atol=1e-10)
    assert model.spectrum().shape == (6,)
    assert clone(model).get_params() == model.get_params()
    with pytest.raises(DimensionError):
        model.score_samples(X[:, :3])
