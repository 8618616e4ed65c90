import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf, gammaincc

from explosiontime.model import Interval, builtin_catalog, default_ladder, make_spec
from explosiontime.montecarlo import SurvivalCurve
from explosiontime import pde

REAL = Interval(-math.inf, math.inf)
POS = Interval(0.0, math.inf)


def bm_exit_survival(x, a, b, T, terms=400):
    """Sine-eigenfunction series for P_x(BM stays in (a, b) up to T)."""
    L = b - a
    k = np.arange(1, terms + 1)
    coef = 2.0 * (1.0 - (-1.0) ** k) / (k * math.pi)
    return float(np.sum(coef * np.sin(k * math.pi * (x - a) / L) * np.exp(-(k * math.pi / L) ** 2 * T / 2.0)))


@pytest.fixture(scope="module")
def bm():
    return make_spec(REAL, "1", "0")


@pytest.fixture(scope="module")
def recip():
    return builtin_catalog("reciprocal_bm")


# -- truncated problem -------------------------------------------------------------


def test_grid_invariants(recip):
    g = pde.solve_truncated_cauchy(recip, 4, 200, 100, 1.0, xi=1.0)
    assert np.all(g.u[0] == 1.0)
    assert np.all(g.u[1:, 0] == 0.0) and np.all(g.u[1:, -1] == 0.0)
    assert g.u.min() >= -1e-8 and g.u.max() <= 1.0 + 1e-8
    assert g.nodes[0] == 1.0 / 16 and g.nodes[-1] == 16.0
    assert np.all(np.diff(g.nodes) > 0) and np.all(np.diff(g.times) > 0)


def test_single_tiny_step_stays_near_initial_data(bm):
    g = pde.solve_truncated_cauchy(bm, 1, 400, 1, 1e-8, bounds=(-5.0, 5.0), xi=0.0)
    assert g.at(0.0)[-1] == pytest.approx(1.0, abs=1e-12)


def test_brownian_two_sided_exit(bm):
    g = pde.solve_truncated_cauchy(bm, 1, 800, 800, 1.0, bounds=(-5.0, 5.0), xi=0.0)
    assert g.at(0.0, [1.0])[0] == pytest.approx(bm_exit_survival(0.0, -5, 5, 1.0), abs=5e-3)
    g = pde.solve_truncated_cauchy(bm, 1, 800, 800, 1.0, bounds=(-1.0, 2.0), xi=0.0)
    assert g.at(0.0, [0.5])[0] == pytest.approx(bm_exit_survival(0.0, -1, 2, 0.5), abs=5e-4)


def test_reciprocal_truncated_at_level_six(recip):
    # h(x) = 1 - 1/x turns the level (1/64, 64) into BM from 0 in (-63, 63/64)
    g = pde.solve_truncated_cauchy(recip, 6, 800, 800, 1.0, xi=1.0)
    assert (g.nodes[0], g.nodes[-1]) == (1.0 / 64, 64.0)
    val = g.at(1.0, [1.0])[0]
    assert val == pytest.approx(bm_exit_survival(0.0, -63.0, 63.0 / 64, 1.0), abs=5e-3)
    # the untruncated value is only 8e-3 higher
    assert val < recip_closed(1.0, 1.0)


def recip_closed(xi, T):
    return erf(1.0 / (xi * math.sqrt(2.0 * T)))


def test_time_monotone_and_bounded(recip):
    g = pde.solve_truncated_cauchy(recip, 8, 400, 400, 2.0, xi=1.0)
    assert np.all(np.diff(g.u[1:], axis=0) <= 1e-10)


def test_grid_refinement(recip):
    coarse = pde.solve_truncated_cauchy(recip, 6, 400, 400, 1.0, xi=1.0).at(1.0, [1.0])[0]
    fine = pde.solve_truncated_cauchy(recip, 6, 800, 800, 1.0, xi=1.0).at(1.0, [1.0])[0]
    assert abs(fine - coarse) < 4 * 5e-3
    assert abs(fine - coarse) < 1e-3


def test_comparison_principle(bm):
    base = pde.solve_truncated_cauchy(bm, 3, 400, 200, 1.0, xi=0.0)
    lifted = pde.solve_truncated_cauchy(bm, 3, 400, 200, 1.0, xi=0.0, initial=1.1)
    assert np.all(lifted.u >= base.u - 1e-12)


def test_raw_coordinates_agree_with_lamperti(recip):
    lam = pde.minimal_survival(recip, 1.0, [0.5, 1.0], coordinates="lamperti")
    raw = pde.minimal_survival(recip, 1.0, [0.5, 1.0], coordinates="raw", space_nodes=1600)
    assert lam.info["coordinates"] == "lamperti" and raw.info["coordinates"] == "raw"
    assert np.allclose(lam.estimate, raw.estimate, atol=5e-3)


def test_missing_derivative_uses_raw_grid():
    spec = make_spec(POS, "-x^2", "-x", differentiable_s=False)
    g = pde.solve_truncated_cauchy(spec, 3, 200, 100, 0.5, xi=1.0)
    assert g.coordinates == "raw"


def test_steep_drift_stays_positive():
    g = pde.solve_truncated_cauchy(builtin_catalog("exp_drift"), 6, 400, 200, 1.0, xi=0.0)
    assert g.max_peclet > 1e10 and g.upwind_nodes > 0
    assert g.u.min() >= 0.0


def test_grid_csv(recip):
    g = pde.solve_truncated_cauchy(recip, 2, 20, 4, 0.5, xi=1.0)
    lines = g.to_csv().splitlines()
    assert lines[0] == "x,T,u"
    assert len(lines) == 1 + g.times.size * g.nodes.size
    x, T, u = (float(v) for v in lines[-1].split(","))
    assert (x, T, u) == (g.nodes[-1], g.times[-1], g.u[-1, -1])


def test_error_carries_diagnostics():
    err = pde.InstabilityError("bad", max_peclet=3.5, cfl=12.0)
    assert "max_peclet=3.5" in str(err) and err.diagnostics["cfl"] == 12.0
    assert isinstance(err, ArithmeticError)


def test_bounds_must_surround_anchor(bm):
    with pytest.raises(ValueError):
        pde.solve_truncated_cauchy(bm, 1, 10, 10, 1.0, bounds=(1.0, 2.0), xi=0.0)


# -- minimal solution ---------------------------------------------------------------


def test_minimal_survival_nonexplosive_is_one(bm):
    c = pde.minimal_survival(bm, 0.0, [0.5, 1.0, 2.0])
    assert np.allclose(c.estimate, 1.0, atol=1e-4)
    assert c.info["converged"] and c.method == "pde"


def test_minimal_survival_reciprocal(recip):
    T = np.array([0.5, 1.0, 2.0])
    for xi in (1.0, 2.0):
        c = pde.minimal_survival(recip, xi, T)
        assert np.allclose(c.estimate, [recip_closed(xi, t) for t in T], atol=5e-3)


def test_minimal_survival_htransform():
    c = pde.minimal_survival(builtin_catalog("htransform_power"), 1.0, [1.0, 2.0, 4.0])
    assert np.allclose(c.estimate, 1.0 - np.exp(-2.0 / np.array([1.0, 2.0, 4.0])), atol=5e-3)
    assert c.value_at(2.0) == pytest.approx(0.632121, abs=5e-3)


@pytest.mark.parametrize("delta", [0.0, 1.0])
def test_minimal_survival_bessel(delta):
    T = np.array([0.5, 1.0])
    c = pde.minimal_survival(builtin_catalog("bessel", {"delta": delta}), 1.0, T)
    # the hitting time of 0 is 1/(2 G) with G ~ Gamma(1 - delta/2)
    oracle = 1.0 - gammaincc(1.0 - delta / 2.0, 1.0 / (2.0 * T))
    assert np.allclose(c.estimate, oracle, atol=5e-3)


def test_level_estimates_increase(recip):
    c = pde.minimal_survival(recip, 1.0, [0.5, 1.0])
    assert np.all(np.diff(c.level_estimates, axis=0) >= -1e-6)
    assert c.info["increment"] < 1e-4


@settings(max_examples=8, deadline=None)
@given(xi=st.floats(0.3, 3.0), T=st.floats(0.2, 2.0))
def test_truncated_solutions_monotone_in_level(xi, T):
    spec = builtin_catalog("reciprocal_bm")
    lad = default_ladder(spec.interval, 6, anchor=xi)
    vals = [pde.solve_truncated_cauchy(spec, n, 200, 100, T, ladder=lad).at(xi, [T])[0] for n in range(1, 7)]
    assert np.all(np.diff(vals) >= -1e-3)
    assert all(0.0 <= v <= 1.0 for v in vals)


def test_xi_outside_first_level(recip):
    lad = default_ladder(POS, 5, anchor=1.0)
    with pytest.raises(ValueError):
        pde.minimal_survival(recip, 3.0, [1.0], ladder=lad)


# -- resolvent ---------------------------------------------------------------------


def test_resolvent_reciprocal(recip):
    val, info = pde.minimal_resolvent(recip, 1.0, 1.0)
    assert val == pytest.approx(1.0 - math.exp(-math.sqrt(2.0)), abs=5e-3)
    assert info["converged"]


def test_resolvent_nonexplosive(bm):
    for lam in (0.5, 1.0, 4.0):
        val, _ = pde.minimal_resolvent(bm, 0.0, lam)
        assert val == pytest.approx(1.0 / lam, abs=5e-3)


def test_resolvent_truncated_brownian(bm):
    # cosh form of the exit-time transform from (-a, a)
    lam, a = 2.0, 1.5
    sol = pde.solve_resolvent(bm, lam, 1, 800, bounds=(-a, a), xi=0.0)
    exact = (1.0 - 1.0 / math.cosh(math.sqrt(2.0 * lam) * a)) / lam
    assert sol.at(0.0) == pytest.approx(exact, abs=1e-4)
    assert sol.values[0] == 0.0 and sol.values[-1] == 0.0


@settings(max_examples=10, deadline=None)
@given(lam=st.floats(0.05, 500.0), n=st.integers(1, 8))
def test_resolvent_bounded_by_inverse_lambda(lam, n):
    sol = pde.solve_resolvent(builtin_catalog("reciprocal_bm"), lam, n, 200, xi=1.0)
    assert np.all(sol.values >= 0.0) and np.all(sol.values <= 1.0 / lam + 1e-8)


def test_resolvent_needs_positive_lambda(bm):
    with pytest.raises(ValueError):
        pde.solve_resolvent(bm, 0.0, 1, 10, xi=0.0)


# -- Laplace consistency ---------------------------------------------------------


def test_laplace_of_constant_curve():
    T = np.linspace(0.01, 40.0, 4000)
    curve = SurvivalCurve(T=T, estimate=np.ones_like(T), stderr=np.zeros_like(T), method="pde", n_paths=0,
                          censored_fraction=0.0)
    assert pde.laplace_consistency(curve, 1.0, 1.0) < 1e-5


def test_laplace_coverage_error():
    T = np.linspace(0.1, 2.0, 20)
    curve = SurvivalCurve(T=T, estimate=np.ones_like(T), stderr=np.zeros_like(T), method="pde", n_paths=0,
                          censored_fraction=0.0)
    with pytest.raises(pde.CoverageError):
        pde.laplace_consistency(curve, 1.0, 1.0)


def test_laplace_reciprocal_and_htransform(recip):
    T = np.linspace(0.02, 12.0, 600)
    c = pde.minimal_survival(recip, 1.0, T)
    assert pde.laplace_consistency(c, 1.0 - math.exp(-math.sqrt(2.0)), 1.0) < 1e-2
    h = builtin_catalog("htransform_power")
    c = pde.minimal_survival(h, 1.0, T)
    u_hat, _ = pde.minimal_resolvent(h, 1.0, 1.0)
    assert pde.laplace_consistency(c, u_hat, 1.0) < 1e-2
