import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize

from robust_rmt.datagen import GeneratorSpec, generate, sample_tau
from robust_rmt.deterministic import (ContourSpec, DeterministicEquivalent, DenseFamily,
                                      PopulationModel, SharedFamily, TauSplit,
                                      deterministic_resolvent, detect_isolated_eigenvalue, eta,
                                      eta_residual, eta_tau, lambda_fixed_point, lambda_residual,
                                      predict, predicted_alignment, predicted_cdf,
                                      predicted_density, predicted_stieltjes, solve_tilde_D,
                                      solve_U, spectral_stieltjes, tilde_D_bracket, tilde_D_map,
                                      u_fixed_point_map)
from robust_rmt.estimator import empirical_alignment, solve_robust, trace_map
from robust_rmt.exceptions import DimensionError, DomainError, SpikeAbsentError
from robust_rmt.fixed_point import fixed_point
from robust_rmt.stable_metric import (check_stable_on_grid, constant, default_grid,
                                      get_weight_function, stable_distance)

U5 = get_weight_function("min_lin_inv(5)")


def random_psd(rng, p, scale=1.0):
    a = rng.standard_normal((p, p))
    return scale * (a @ a.T / p + 0.1 * np.eye(p))


def lambda_scalar(delta, z, ratio):
    # lambda (delta / (1 + delta lambda) + z) = p / n
    return optimize.brentq(lambda lam: lam * (delta / (1 + delta * lam) + z) - ratio, 0, ratio / z,
                           xtol=1e-16, rtol=4 * np.finfo(float).eps)


def eta_scalar(u, x):
    return optimize.brentq(lambda e: e * (1 / x + float(u(e))) - 1, 1e-300, x,
                           xtol=1e-300, rtol=4 * np.finfo(float).eps)


# eta -------------------------------------------------------------------------

def test_eta_zero_weight_is_identity():
    x = np.geomspace(1e-3, 1e3, 7)
    assert np.allclose(eta(constant(0.0), x), x, rtol=1e-15)
    assert np.allclose(eta_tau(constant(0.0), TauSplit.from_tau(np.full(7, 3.0)), x), x, rtol=1e-14)


def test_eta_inv_sqrt_closed_form():
    u = get_weight_function("inv_sqrt")
    value = eta(u, 1.0, validate=False)
    # sqrt(eta) = 1 - eta
    assert value == pytest.approx(((math.sqrt(5) - 1) / 2) ** 2, abs=1e-14)
    assert value == pytest.approx(eta_scalar(u, 1.0), abs=1e-14)
    assert eta_residual(u, 1.0, value) <= 1e-12
    with pytest.raises(DomainError):
        eta(u, 1.0)


def test_eta_residual_floor_and_stability():
    grid = default_grid()
    values = eta(U5, grid)
    assert np.max(eta_residual(U5, grid, values)) <= 1e-12
    assert np.all(values / grid >= 1 - U5.u_times_sup - 1e-12)
    assert eta(U5, 1e6) / 1e6 >= 1 - U5.u_times_sup
    assert check_stable_on_grid(lambda x: eta(U5, x), grid).is_stable


def test_eta_matches_bisection_oracle():
    for x in [1e-4, 0.3, 1.0, 7.0, 1e4]:
        assert eta(U5, x) == pytest.approx(eta_scalar(U5, x), rel=1e-13)


def test_eta_tau(rng):
    x = rng.uniform(0.01, 10, 6)
    assert np.allclose(eta_tau(U5, TauSplit.from_tau(np.ones(6)), x), eta(U5, x), rtol=1e-15)
    split = TauSplit.from_tau(np.abs(rng.standard_cauchy(6)))
    h = 1e-6
    slope = np.abs(eta_tau(U5, split, x + h) - eta_tau(U5, split, x)) / h
    assert np.all(slope <= 1 + 1e-6)


def test_tau_split():
    split = TauSplit.from_tau([0.2, 1.0, 5.0])
    assert np.all(split.tau_under >= 1) and np.all(split.tau_bar <= 1)
    assert np.allclose(split.tau, [0.2, 1.0, 5.0])


# Lambda ----------------------------------------------------------------------

def test_lambda_small_delta_limit(rng):
    p, n = 5, 7
    c = np.stack([random_psd(rng, p) for _ in range(n)])
    model = PopulationModel(c, np.ones(n), 1.0)
    z = 0.7
    lam = lambda_fixed_point(model, np.full(n, 1e-9), z)
    assert np.allclose(lam, np.einsum("ijj->i", c) / n / z, rtol=1e-6)
    q = deterministic_resolvent(model, np.full(n, 1e-9), lam, z)
    assert np.allclose(q, np.eye(p) / z, atol=1e-8)


@pytest.mark.parametrize("z", [0.3, 1.0, 4.0])
def test_lambda_scalar_oracle(z):
    p, n, d = 6, 9, 1.7
    model = PopulationModel(np.eye(p), np.ones(n), 1.0)
    lam = lambda_fixed_point(model, np.full(n, d), z)
    ref = lambda_scalar(d, z, p / n)
    assert np.allclose(lam, ref, rtol=1e-13)
    q = deterministic_resolvent(model, np.full(n, d), lam, z)
    assert np.allclose(q, np.eye(p) / (d / (1 + d * ref) + z), rtol=1e-12)


def test_lambda_residual_random_model(rng):
    p, n = 8, 12
    c = np.stack([random_psd(rng, p) for _ in range(n)])
    model = PopulationModel(c, np.ones(n), 1.0)
    delta = rng.uniform(0.1, 3, n)
    for z in [0.5, 2.0]:
        lam = lambda_fixed_point(model, delta, z)
        assert np.max(lambda_residual(model, delta, lam, z)) <= 1e-11
        q = deterministic_resolvent(model, delta, lam, z)
        assert np.allclose(np.einsum("ijk,kj->i", c, q) / n, lam, atol=1e-10)
        assert np.linalg.norm(q, 2) <= 1 / z + 1e-12
    lam_c = lambda_fixed_point(model, delta, 0.5 + 0.5j)
    assert np.max(lambda_residual(model, delta, lam_c, 0.5 + 0.5j)) <= 1e-11


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_lambda_is_stable(p, n, seed):
    rng = np.random.default_rng(seed)
    model = PopulationModel(random_psd(rng, p), np.ones(n), 1.0)
    fam = model.family("plain")
    d1, d2 = rng.uniform(0.01, 5, n), rng.uniform(0.01, 5, n)
    z = rng.uniform(0.1, 3)
    lhs = stable_distance(lambda_fixed_point(fam, d1, z), lambda_fixed_point(fam, d2, z))
    assert lhs <= stable_distance(d1, d2) * (1 + 1e-9) + 1e-12


def test_shared_and_dense_families_agree(rng):
    p, n = 6, 5
    c = random_psd(rng, p)
    tau = np.abs(rng.standard_cauchy(n)) + 0.05
    m = rng.standard_normal(p)
    mu = rng.standard_normal(p) * 0.3
    shared = PopulationModel(c, tau, 1.0, signal=m, means=mu)
    dense = PopulationModel(np.broadcast_to(c, (n, p, p)).copy(), tau, 1.0, signal=m,
                            means=np.broadcast_to(mu, (n, p)).copy())
    assert shared.shared and not dense.shared
    d = rng.uniform(0.1, 2, n)
    v = rng.standard_normal(p)
    for kind in ["plain", "barred", "barred_free", "data"]:
        fs, fd = shared.family(kind), dense.family(kind)
        assert isinstance(fs, SharedFamily) and isinstance(fd, DenseFamily)
        assert np.allclose(fs.traces(), fd.traces())
        for z in [0.8, -0.3 + 0.4j]:
            rs, rd = fs.assemble(d, z), fd.assemble(d, z)
            assert np.allclose(rs.dense(), rd.dense(), atol=1e-12)
            assert np.allclose(rs.sample_traces(), rd.sample_traces(), atol=1e-12)
            assert rs.normalized_trace() == pytest.approx(rd.normalized_trace(), abs=1e-12)
            assert rs.quad(v) == pytest.approx(rd.quad(v), abs=1e-11)
    # the data family is the second moment of sqrt(tau) z + m
    members = dense.family("data").members
    ref = tau[:, None, None] * c + np.outer(m, m) + np.sqrt(tau)[:, None, None] * (
        np.outer(mu, m) + np.outer(m, mu))
    assert np.allclose(members, ref)


def test_model_validation(rng):
    with pytest.raises(DomainError):
        PopulationModel(np.eye(3), [1.0, -1.0], 1.0)
    with pytest.raises(DomainError):
        PopulationModel(-np.eye(3), [1.0], 1.0)
    with pytest.raises(DimensionError):
        PopulationModel(np.eye(3), [1.0], 1.0, signal=np.ones(2))
    with pytest.raises(DomainError):
        PopulationModel(np.eye(3) * 1e-3, np.ones(3), 1.0, trace_floor=0.5)


# D_tilde and U ---------------------------------------------------------------

def heavy_model(rng, p=40, n=32, signal=1.0):
    tau = np.abs(rng.standard_cauchy(n))
    return PopulationModel(random_psd(rng, p), tau, 1.0, signal=np.full(p, signal / np.sqrt(p)))


def test_tilde_D_residual_and_bracket(rng):
    model = heavy_model(rng)
    for with_signal in (True, False):
        d = solve_tilde_D(model, U5, with_signal=with_signal)
        step = tilde_D_map(model, U5, with_signal)
        assert np.max(np.abs(d - step(d))) <= 1e-11
        lo, hi = tilde_D_bracket(model, U5, with_signal)
        assert np.all(lo <= d) and np.all(d <= hi)


def test_tilde_D_trivial_split(rng):
    model = PopulationModel(random_psd(rng, 10), np.ones(8), 1.0)
    assert np.array_equal(solve_tilde_D(model, U5, True), solve_tilde_D(model, U5, False))


def test_tilde_D_scalar_oracle():
    p, n, gamma = 6, 9, 0.8
    model = PopulationModel(np.eye(p), np.ones(n), gamma)
    d = solve_tilde_D(model, U5, with_signal=False)

    def gap(x):
        lam = lambda_scalar(float(U5(x)), gamma, p / n)
        return x - eta_scalar(U5, lam)

    ref = optimize.brentq(gap, 1e-6, p / n / gamma, xtol=1e-16, rtol=4 * np.finfo(float).eps)
    assert np.allclose(d, ref, rtol=1e-12)


def test_U_routes_and_residual(rng):
    model = heavy_model(rng)
    direct = solve_U(model, U5)
    via = solve_U(model, U5, route="via_tilde_D")
    assert np.allclose(direct, via, rtol=1e-11)
    step = u_fixed_point_map(model, U5)
    assert np.max(np.abs(direct - step(direct))) <= 1e-11
    d_free = solve_tilde_D(model, U5, with_signal=False)
    split = model.split
    assert np.all(direct > 0)
    assert np.all(direct <= U5.u_times_sup * split.tau_bar / d_free * (1 + 1e-12))


def test_U_routes_heavy_tau_predictions():
    spec = GeneratorSpec("gaussian", 200, 160, tau_law="student_abs(1)", seed=5)
    model = PopulationModel(np.eye(200), sample_tau(spec), 1.0)
    a = solve_U(model, U5)
    b = solve_U(model, U5, route="via_tilde_D")
    for z in np.geomspace(0.1, 10, 9):
        assert predicted_stieltjes(model, a, z) == pytest.approx(predicted_stieltjes(model, b, z), abs=2e-2)


def test_U_vanishing_weight(rng):
    model = PopulationModel(random_psd(rng, 5), np.ones(4), 1.0)
    weights = solve_U(model, constant(1e-13), validate=False)
    assert np.max(np.abs(weights)) <= 1e-10
    with pytest.raises(DomainError):
        solve_U(model, constant(1e-13))


def test_prediction_rejects_inv_sqrt(rng):
    model = PopulationModel(np.eye(3), np.ones(3), 1.0)
    with pytest.raises(DomainError):
        solve_tilde_D(model, "inv_sqrt")


# Stieltjes and density -------------------------------------------------------

def test_stieltjes_limits():
    p, n = 6, 9
    model = PopulationModel(np.eye(p), np.ones(n), 1.0)
    assert predicted_stieltjes(model, np.full(n, 1e-12), 2.0) == pytest.approx(0.5, rel=1e-10)
    d = 1.3
    lam = lambda_scalar(d, 1.0, p / n)
    assert predicted_stieltjes(model, np.full(n, d), 1.0) == pytest.approx(1 / (d / (1 + d * lam) + 1),
                                                                          rel=1e-12)
    w = 0.4 + 0.2j
    assert spectral_stieltjes(model, np.full(n, d), w) == predicted_stieltjes(model, np.full(n, d), -w)


def test_herglotz_sign(rng):
    model = heavy_model(rng, signal=0.0)
    weights = solve_U(model, U5)
    grid = np.linspace(0, 3, 61)
    dens = predicted_density(model, weights, grid, 1e-2)
    assert np.all(dens.stieltjes.imag >= -1e-10)
    assert np.all(dens.density >= 0)


def test_density_collapses_for_vanishing_weights():
    n, eps = 10, 1e-2
    model = PopulationModel(np.eye(8), np.ones(n), 1.0)
    grid = np.linspace(0, 1, 201)
    dens = predicted_density(model, np.full(n, 1e-12), grid, eps)
    lorentz = eps / np.pi / (grid ** 2 + eps ** 2)
    assert np.allclose(dens.density, lorentz, rtol=1e-6)
    assert grid[np.argmax(dens.density)] < 2 * eps


@pytest.mark.parametrize("scale", [1.0, 0.35])
def test_density_matches_marchenko_pastur(scale):
    p, n = 100, 200
    ratio = p / n
    model = PopulationModel(np.eye(p), np.ones(n), 1.0)
    lo, hi = scale * (1 - math.sqrt(ratio)) ** 2, scale * (1 + math.sqrt(ratio)) ** 2
    grid = np.linspace(0.5 * lo, 1.2 * hi, 1500)
    dens = predicted_density(model, np.full(n, scale), grid, 1e-5)
    inside = grid[dens.density > 1e-3 * dens.density.max()]
    assert inside[0] == pytest.approx(lo, rel=0.05)
    assert inside[-1] == pytest.approx(hi, rel=0.05)
    assert dens.integral == pytest.approx(1, abs=0.05)
    assert dens.warning is None


def test_density_warning_and_null_atom():
    p, n = 60, 40
    model = PopulationModel(np.eye(p), np.ones(n), 1.0)
    narrow = predicted_density(model, np.ones(n), np.linspace(0.5, 1.0, 20), 1e-2)
    assert narrow.warning is not None
    grid = np.geomspace(1e-4, 10, 800)
    kept = predicted_density(model, np.ones(n), grid, 0.01 * grid, drop_null=True)
    assert kept.null_mass == pytest.approx(1 - n / p)
    assert kept.integral == pytest.approx(1, abs=0.05)
    cdf = predicted_cdf(grid, kept.density)
    assert cdf[0] == 0 and cdf[-1] == pytest.approx(1) and np.all(np.diff(cdf) >= 0)


# Alignment -------------------------------------------------------------------

def test_alignment_trivial_cases(rng):
    model = heavy_model(rng)
    weights = solve_U(model, U5)
    contour = ContourSpec(50.0, 1.0)
    assert predicted_alignment(model, weights, np.zeros(model.p), contour).value == 0.0
    far = predicted_alignment(model, weights, model.signal, contour)
    assert abs(far.value) <= 1e-8 and far.imag_residue <= 1e-8
    with pytest.raises(DimensionError):
        predicted_alignment(model, weights, np.ones(3), contour)


def test_spike_detection():
    eig = np.concatenate([np.linspace(0, 1, 50), [3.0]])
    contour = detect_isolated_eigenvalue(eig)
    assert contour.center == 3.0 and contour.radius == pytest.approx(1.0) and contour.nodes == 256
    with pytest.raises(SpikeAbsentError):
        detect_isolated_eigenvalue(np.linspace(0, 1, 50))
    with pytest.raises(SpikeAbsentError):
        detect_isolated_eigenvalue(eig, bulk_edge=3.5)
    theta, pts = contour.points()
    assert np.all(np.abs(pts.imag) > 0)


def test_alignment_matches_simulation():
    p, n, scale = 150, 300, 2.5
    values = []
    for seed in range(3):
        spec = GeneratorSpec("gaussian", p, n, tau_law="student_abs(1)", signal_scale=scale, seed=seed)
        X, _, tau, m = generate(spec)
        est = solve_robust(X, U5, 1.0)
        unit = m / np.linalg.norm(m)
        model = PopulationModel(np.eye(p), tau, 1.0, signal=m)
        weights = solve_U(model, U5)
        contour = detect_isolated_eigenvalue(np.linalg.eigvalsh(est.scatter))
        res = predicted_alignment(model, weights, unit, contour)
        assert 0 <= res.value <= 1 + 1e-6 and res.imag_residue <= 1e-6
        values.append((res.value, empirical_alignment(est.scatter, unit)))
    pred, emp = np.mean(values, axis=0)
    assert pred == pytest.approx(emp, abs=0.05)


# Bundles ---------------------------------------------------------------------

def test_predict_bundle(rng):
    model = heavy_model(rng)
    grid = np.linspace(0.01, 2, 20)
    pred = predict(model, U5, grid=grid, eps=0.05)
    assert np.allclose(pred.U, solve_U(model, U5), rtol=1e-11)
    assert len(pred.stieltjes_samples) == 20 and len(pred.density_samples) == 20
    lam = pred.lambda_at(1.0)
    assert lam.shape == (model.n,)
    est = DeterministicEquivalent(gamma=1.0).fit(model.second_moments, model.tau, signal=model.signal)
    assert np.allclose(est.tilde_D_, pred.tilde_D)
    assert est.stieltjes(1.0) == pytest.approx(predicted_stieltjes(model, pred.U, 1.0))
    assert est.get_params() == {"weight": "min_lin_inv(5)", "gamma": 1.0}


def test_perturbation_constant_is_finite():
    # fixed points of f(D) = I(X, u(D)) and of a perturbed f'(D) = s f(D):
    # |D - D'| / |f(D') - f'(D')| stays bounded
    rng = np.random.default_rng(7)
    ratios = []
    for _ in range(1000):
        p, n = rng.integers(1, 9, 2)
        X = rng.standard_normal((p, n))
        gamma = rng.uniform(0.2, 2)
        scale = 1 + rng.uniform(-1e-3, 1e-3, n)
        a = solve_robust(X, U5, gamma)
        perturbed = lambda d: scale * trace_map(X, U5(d), gamma)  # noqa: E731
        b = fixed_point(perturbed, a.delta_hat, tol=1e-14).point
        gap = np.max(np.abs(trace_map(X, U5(b), gamma) - perturbed(b)))
        if gap > 0:
            ratios.append(np.max(np.abs(a.delta_hat - b)) / gap)
    ratios = np.asarray(ratios)
    assert np.all(np.isfinite(ratios))
    assert ratios.max() < 1e3
