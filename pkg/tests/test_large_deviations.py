from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldtn import oracle
from ldtn.collision import ModelParams
from ldtn.errors import DegenerateEigenvectorError, NumericError, ValidationError
from ldtn.large_deviations import (
    RateFunctionCurve,
    ScgfCurve,
    ScgfPoint,
    SolverSettings,
    activity_finite_difference,
    activity_hellmann_feynman,
    bond_dimension_ladder,
    compute_curve,
    estimate_s_star,
    left_fixed_point,
    legendre_sup,
    normalize_trace,
    power_iterate_scgf,
    rate_function_legendre,
    scan_phase_diagram,
    stationary_activity,
    synthetic_curve,
)
from ldtn.mps import Mps, identity_operator, inner, maximally_mixed, product_operator, trace_vectorized

P2 = ModelParams(L=2, v=2.0)
TOY = ModelParams(L=1, omega=0.0)
FLIP = math.sin(math.sqrt(TOY.gamma * TOY.dt)) ** 2


def lossless(L, tol=1e-12):
    return SolverSettings(d_max=4**L, cutoff=0.0, tol=tol, max_iter=5000)


def toy_theta(s):
    return max(0.0, math.log(1 - FLIP + FLIP * math.exp(-s)))


def closed_form_curve(s_values, theta_fn, act_fn=None, L=1):
    pts = [
        ScgfPoint(float(s), float(theta_fn(s)), None if act_fn is None else float(act_fn(s)))
        for s in s_values
    ]
    return ScgfCurve(ModelParams(L=L), tuple(pts), None if act_fn is None else act_fn(0.0))


def dense_theta(p, s):
    lam, _, _ = oracle.dense_dominant_eig(oracle.dense_tilted_superoperator(p, s, trotterized=True))
    return math.log(lam) / p.L


# ---------------------------------------------------------------- power method


@pytest.mark.parametrize("s", [-0.3, -0.01, 0.0, 0.02, 0.5])
def test_power_method_matches_dense(s):
    point, rho = power_iterate_scgf(P2, s, lossless(2))
    assert point.converged
    assert abs(point.theta - dense_theta(P2, s)) < 1e-10
    assert point.iterations >= 1 and point.final_step_residual < 1e-12


def test_theta_zero_at_zero_bias_and_gamma_zero():
    point, _ = power_iterate_scgf(P2, 0.0, lossless(2))
    assert abs(point.theta) < 1e-12
    p = ModelParams(L=2, v=1.0, gamma=0.0)
    for s in (-0.5, 0.3):
        point, _ = power_iterate_scgf(p, s, lossless(2))
        assert abs(point.theta) < 1e-12


@pytest.mark.parametrize("s", [-0.5, -0.05, 0.2, 1.0])
def test_toy_model_kink(s):
    point, _ = power_iterate_scgf(TOY, s, lossless(1, 1e-13))
    assert point.theta == pytest.approx(toy_theta(s), abs=1e-9)


def test_power_method_reports_non_convergence():
    point, _ = power_iterate_scgf(P2, 0.3, replace(lossless(2), max_iter=2))
    assert not point.converged
    assert point.iterations == 2


def test_normalize_trace_removes_phase():
    rho = maximally_mixed(3)
    sites = list(rho.sites)
    sites[0] = sites[0] * (2.0 * np.exp(0.05j))
    out = normalize_trace(Mps(tuple(sites), rho.log_norm, rho.center))
    assert abs(trace_vectorized(out) - 1) < 1e-14
    np.testing.assert_allclose(out.to_dense(), rho.to_dense(), atol=1e-14)
    sites[0] = rho.sites[0] * 1j
    with pytest.raises(NumericError):
        normalize_trace(Mps(tuple(sites), rho.log_norm, rho.center))


def test_power_method_rejects_bad_tol():
    with pytest.raises(ValidationError):
        power_iterate_scgf(P2, 0.1, replace(lossless(2), tol=0.0))


# ----------------------------------------------------------- left eigenvector


def test_left_fixed_point_identity_at_zero_bias():
    rho = maximally_mixed(2)
    point, omega = left_fixed_point(P2, 0.0, lossless(2), rho)
    np.testing.assert_allclose(omega.to_dense(), identity_operator(2).to_dense(), atol=1e-10)
    assert inner(omega, rho) == pytest.approx(1.0)


def test_left_fixed_point_toy_is_excited_projector():
    s = 0.4
    point, rho = power_iterate_scgf(TOY, s, lossless(1, 1e-13))
    _, omega = left_fixed_point(TOY, s, lossless(1, 1e-13), rho)
    excited = product_operator([np.diag([0.0, 1.0])]).to_dense()
    vec = omega.to_dense()
    np.testing.assert_allclose(vec / vec[3], excited, atol=1e-8)


@pytest.mark.parametrize("s", [-0.1, 0.05, 0.3])
def test_left_eigenvalue_equals_right(s):
    right, rho = power_iterate_scgf(P2, s, lossless(2))
    left, _ = left_fixed_point(P2, s, lossless(2), rho)
    assert left.theta == pytest.approx(right.theta, abs=1e-10)


# ------------------------------------------------------------------ activity


def test_stationary_activity_closed_form_and_gamma_zero():
    assert stationary_activity(TOY, 4, 0.0) == pytest.approx(FLIP / 2, abs=1e-12)
    assert abs(stationary_activity(ModelParams(L=2, v=1.0, gamma=0.0), 16, 0.0)) < 1e-14


def test_stationary_activity_matches_dense():
    for p in (P2, ModelParams(L=3, v=5.875)):
        m = oracle.dense_tilted_superoperator(p, 0.0, trotterized=True, derivative=True)
        rho = oracle.vectorize_density(np.eye(2**p.L) / 2**p.L, p.L)
        eye = oracle.vectorize_density(np.eye(2**p.L), p.L)
        expected = -(eye @ m.matrix @ rho).real / p.L
        assert stationary_activity(p, 4**p.L, 0.0) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("s", [-0.05, 0.01, 0.2])
def test_hellmann_feynman_matches_dense_derivative(s):
    settings_ = lossless(2, 1e-13)
    point, rho = power_iterate_scgf(P2, s, settings_)
    _, omega = left_fixed_point(P2, s, settings_, rho)
    a = activity_hellmann_feynman(P2, s, rho, omega, point.theta, 16, 0.0)
    h = 1e-4
    fd = -(dense_theta(P2, s + h) - dense_theta(P2, s - h)) / (2 * h)
    assert a == pytest.approx(fd, rel=1e-6)


def test_hellmann_feynman_degenerate_overlap():
    ground = product_operator([np.diag([1.0, 0.0])])
    excited = product_operator([np.diag([0.0, 1.0])])
    with pytest.raises(DegenerateEigenvectorError):
        activity_hellmann_feynman(TOY, 0.1, ground, excited, 0.0, 4, 0.0)


# ---------------------------------------------------------- finite differences


def test_finite_difference_linear_and_quadratic():
    s = np.array([-0.2, -0.05, 0.0, 0.1, 0.3])
    lin = activity_finite_difference(closed_form_curve(s, lambda x: -0.4 * x))
    np.testing.assert_allclose(lin.activity, 0.4, atol=1e-12)
    grid = np.linspace(-0.5, 0.5, 101)
    quad = activity_finite_difference(closed_form_curve(grid, lambda x: x * x))
    np.testing.assert_allclose(quad.activity[1:-1], -2 * grid[1:-1], atol=1e-10)


def test_finite_difference_toy_branch():
    grid = np.linspace(-0.6, -0.1, 501)
    curve = activity_finite_difference(closed_form_curve(grid, toy_theta))

    def exact(s):
        w = FLIP * math.exp(-s)
        return w / (1 - FLIP + w)

    np.testing.assert_allclose(curve.activity[1:-1], [exact(s) for s in grid[1:-1]], atol=1e-6)


def test_finite_difference_keeps_existing_unless_overwritten():
    pts = (ScgfPoint(0.0, 0.0, 0.9), ScgfPoint(0.1, -0.01), ScgfPoint(0.2, -0.02))
    curve = ScgfCurve(ModelParams(L=1), pts, 0.9)
    assert activity_finite_difference(curve).activity[0] == 0.9
    assert activity_finite_difference(curve, overwrite=True).activity[0] == pytest.approx(0.1)
    with pytest.raises(ValidationError):
        activity_finite_difference(ScgfCurve(ModelParams(L=1), pts[:2]))


# ------------------------------------------------------------- data types


def test_scgf_types_validate():
    with pytest.raises(NumericError):
        ScgfPoint(0.0, math.nan)
    with pytest.raises(ValidationError):
        ScgfPoint(0.0, 0.0, iterations=0)
    with pytest.raises(ValidationError):
        ScgfPoint(0.0, 0.0, error_bar=-1.0)
    with pytest.raises(ValidationError):
        ScgfCurve(ModelParams(L=1), (ScgfPoint(0.1, 0.0), ScgfPoint(0.1, 0.0)))
    with pytest.raises(ValidationError):
        RateFunctionCurve(((0.5, -0.1),))
    with pytest.raises(ValidationError):
        RateFunctionCurve(((1.5, 0.0),))


def test_curve_sorts_points():
    curve = ScgfCurve(ModelParams(L=1), (ScgfPoint(0.2, -0.1), ScgfPoint(-0.1, 0.05)))
    assert list(curve.s) == [-0.1, 0.2]


# -------------------------------------------------------------- rate function


def test_rate_function_gamma_zero():
    curve = closed_form_curve([-0.1, 0.0, 0.1], lambda s: 0.0, lambda s: 0.0)
    rate = rate_function_legendre(curve)
    defined = [(a, f) for a, f in rate.grid if f is not None]
    assert defined == [(0.0, 0.0)]


def toy_activity(s):
    if s >= 0:
        return 0.0 if s > 0 else FLIP / 2
    w = FLIP * math.exp(-s)
    return w / (1 - FLIP + w)


def test_rate_function_toy_two_branch_transform():
    s = np.concatenate([np.linspace(-4, 0, 4001), np.linspace(0.001, 1, 1000)])
    curve = closed_form_curve(s, toy_theta, toy_activity)
    a = np.linspace(0, 0.95, 39)
    phi = legendre_sup(curve, a)

    def exact(x):
        if x <= FLIP:
            return 0.0
        return x * math.log(x / FLIP) + (1 - x) * math.log((1 - x) / (1 - FLIP))

    np.testing.assert_allclose(phi, [exact(x) for x in a], atol=1e-6)


def test_rate_function_parametric_matches_grid_sup():
    s = np.linspace(-0.5, 0.5, 41)
    curve = closed_form_curve(s, lambda x: -0.3 * x + 0.25 * x * x, lambda x: 0.3 - 0.5 * x)
    rate = rate_function_legendre(curve)
    a = np.array([x for x, _ in rate.samples])
    np.testing.assert_allclose(legendre_sup(curve, a), [f for _, f in rate.samples], atol=1e-12)
    # phi(a0) = 0
    i0 = int(np.argmin(np.abs(curve.s)))
    assert rate.samples[i0][1] == pytest.approx(0.0, abs=1e-15)
    assert all(f is None or f >= -1e-12 for _, f in rate.grid)


def test_rate_function_requires_activities():
    with pytest.raises(ValidationError):
        rate_function_legendre(closed_form_curve([0.0, 0.1], lambda s: -s))


# ------------------------------------------------------------------------ s*


@settings(max_examples=40, deadline=None)
@given(
    a0=st.floats(0.2, 0.8),
    c=st.floats(0.001, 0.05),
    d=st.floats(-0.5, -0.01),
    Ls=st.lists(st.integers(8, 80), min_size=2, max_size=4, unique=True),
)
def test_s_star_recovers_synthetic_crossing(a0, c, d, Ls):
    s_cross = [c / (a0 + d / L) for L in Ls]
    top = max(s_cross)
    grid = np.concatenate([np.linspace(-0.02, 0.0, 5), np.linspace(0.0005, 3 * top, 60)])
    est = estimate_s_star([synthetic_curve(ModelParams(L=L), grid, a0, c, d) for L in Ls])
    got = dict(est.per_L)
    for L, sc in zip(Ls, s_cross):
        assert got[L] == pytest.approx(sc, abs=1e-10)
    x = 1.0 / np.array(Ls, dtype=float)
    coef = np.polyfit(x, s_cross, 1)
    assert est.s_star == pytest.approx(coef[1], abs=1e-10)
    if len(Ls) == 2:
        assert est.uncertainty is None
    else:
        assert est.uncertainty >= 0


def test_s_star_diagnostics():
    grid = [-0.01, 0.0, 0.001, 0.002]
    curve = synthetic_curve(ModelParams(L=10), grid, 0.5, 0.01, -0.05)
    est = estimate_s_star([curve])
    assert est.s_star is None and est.per_L == ()
    assert any("fewer than two" in d for d in est.diagnostics)
    no_a0 = replace(curve, a0=None)
    assert any("a0 missing" in d for d in estimate_s_star([no_a0]).diagnostics)
    one = synthetic_curve(ModelParams(L=10), np.linspace(0, 0.1, 50), 0.5, 0.01, -0.05)
    est = estimate_s_star([one])
    assert len(est.per_L) == 1 and est.s_star is None


# ------------------------------------------------------------------ scanning


def test_compute_curve_warm_start_and_error_bars():
    settings_ = SolverSettings(d_max=16, cutoff=0.0, tol=1e-12, d_max_ref=14)
    curve = compute_curve(P2, [0.1, -0.1, 0.0, 0.05], settings_)
    assert list(curve.s) == [-0.1, 0.0, 0.05, 0.1]
    assert curve.a0 == pytest.approx(stationary_activity(P2, 16, 0.0))
    assert curve.points[1].activity == curve.a0
    for q in curve.points:
        assert q.error_bar is not None and 0 < q.error_bar < 1e-4
        assert abs(q.theta - dense_theta(P2, q.s)) < 1e-10
    with pytest.raises(ValidationError):
        compute_curve(P2, [], settings_)


def test_compute_curve_hellmann_feynman_activities():
    curve = compute_curve(P2, [-0.05, 0.0, 0.05], lossless(2, 1e-13), hellmann_feynman=True)
    for q in curve.points:
        h = 1e-4
        fd = -(dense_theta(P2, q.s + h) - dense_theta(P2, q.s - h)) / (2 * h)
        assert q.activity == pytest.approx(fd, rel=1e-6)


def test_compute_curve_skips_failed_points(monkeypatch):
    import ldtn.large_deviations as ld

    real = ld.power_iterate_scgf

    def flaky(p, s, settings, rho=None):
        if s == 0.1:
            raise NumericError("boom")
        return real(p, s, settings, rho)

    monkeypatch.setattr(ld, "power_iterate_scgf", flaky)
    with pytest.raises(NumericError):
        compute_curve(P2, [0.0, 0.1], lossless(2))
    curve = compute_curve(P2, [0.0, 0.1, 0.2], lossless(2), skip_failures=True)
    assert list(curve.s) == [0.0, 0.2]


def test_scan_phase_diagram_matches_dense():
    s_grid = [-0.05, -0.01, 0.0, 0.02, 0.1]
    ratios = [1.0, 2.0, 3.8, 5.0, 5.875]
    diagram = scan_phase_diagram(ModelParams(L=2), ratios, s_grid, [2], lossless(2))
    assert not diagram.failures
    worst = 0.0
    for (L, r), curve in diagram.curves.items():
        p = ModelParams(L=2, v=r)
        for q in curve.points:
            worst = max(worst, abs(q.theta - dense_theta(p, q.s)))
    assert worst < 1e-8
    rows = diagram.activity_table()
    assert len(rows) == 25 and all(0 <= row[4] <= 1 for row in rows)


def test_scan_phase_diagram_gamma_zero_has_no_activity():
    base = ModelParams(L=2, gamma=0.0)
    diagram = scan_phase_diagram(base, [1.0, 3.0], [-0.1, 0.0, 0.1], [2], lossless(2))
    for row in diagram.activity_table():
        assert abs(row[4]) < 1e-10


def test_scan_phase_diagram_single_point():
    diagram = scan_phase_diagram(ModelParams(L=2), [2.0], [0.05], [2], lossless(2))
    (curve,) = diagram.curves.values()
    point, _ = power_iterate_scgf(P2, 0.05, lossless(2))
    assert curve.points[0].theta == pytest.approx(point.theta, abs=1e-14)


def test_scan_phase_diagram_records_failures():
    def broken(p, s_grid, settings_):
        if p.L == 20:
            raise NumericError("trace collapsed")
        return synthetic_curve(p, s_grid, 0.5, 0.01, -0.05)

    grid = np.linspace(0, 0.1, 30)
    diagram = scan_phase_diagram(
        ModelParams(L=2), [2.0], grid, [10, 20, 40], SolverSettings(), curve_fn=broken
    )
    assert (20, 2.0) in diagram.failures
    assert len(diagram.s_star[2.0].per_L) == 2


def test_scan_phase_diagram_requires_grids():
    with pytest.raises(ValidationError):
        scan_phase_diagram(ModelParams(L=2), [], [0.0], [2])


def test_scan_phase_diagram_parallel_matches_serial():
    args = (ModelParams(L=2), [2.0, 5.875], [-0.01, 0.0, 0.05], [2], lossless(2))
    serial = scan_phase_diagram(*args)
    parallel = scan_phase_diagram(*args, jobs=2)
    assert serial.activity_table() == parallel.activity_table()


def test_bond_dimension_ladder_converges_to_lossless():
    p = ModelParams(L=3, v=5.875)
    pts = bond_dimension_ladder(p, 0.05, [16, 5, 8], SolverSettings(cutoff=0.0, tol=1e-12))
    assert [q.d_max for q in pts] == [5, 8, 16]
    assert pts[0].error_bar is None
    assert all(q.error_bar is not None for q in pts[1:])
    assert abs(pts[-1].theta - dense_theta(p, 0.05)) < 1e-9
    with pytest.raises(ValidationError):
        bond_dimension_ladder(p, 0.0, [])
