"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s``; the lines are also
collected in the terminal summary.
"""
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import gammaincc, ndtr

from explosiontime import closedform as cf
from explosiontime import expr as ex
from explosiontime import pde
from explosiontime.feller import classify
from explosiontime.model import CATALOG, Interval, builtin_catalog, catalog_names, default_ladder, make_spec
from explosiontime.montecarlo import (SimConfig, SurvivalCurve, companion_terminal_values,
                                      estimate_survival_direct, estimate_survival_feynman_kac)
from explosiontime.transform import LampertiFrame, lamperti_inverse, lamperti_map

pytestmark = pytest.mark.slow

N_PATHS = 100_000
PDE_TOL = 5e-3


def brownian():
    return make_spec(Interval(-math.inf, math.inf), ex.parse("1"), ex.parse("0"))


def mc_direct(spec, xi, T, seed=1, n=N_PATHS):
    return estimate_survival_direct(spec, xi, SimConfig(n_paths=n, seed=seed, scheme="dds_exact", T_grid=T))


def mc_checks(label, curve, ref, max_abs=None):
    out = []
    for T, est, se, r in zip(curve.T, curve.estimate, curve.stderr, ref):
        ok = abs(est - r) <= 3 * se and (max_abs is None or abs(est - r) < max_abs)
        out.append((f"{label} T={T:g}", ok, f"mc={est:.5f} se={se:.5f} ref={r:.5f}"))
    return out


def pde_checks(label, curve, ref, tol=PDE_TOL):
    return [(f"{label} T={T:g}", abs(est - r) < tol, f"pde={est:.5f} ref={r:.5f}")
            for T, est, r in zip(curve.T, curve.estimate, ref)]


def test_criterion_1_reciprocal_three_way(criterion):
    spec = builtin_catalog("reciprocal_bm")
    T = (0.5, 1.0, 2.0)
    checks = []
    start = time.perf_counter()
    for xi in (1.0, 2.0):
        ref = [2 * ndtr(1 / (xi * math.sqrt(t))) - 1 for t in T]
        closed = cf.closed_form("reciprocal_bm").curve(xi, T).estimate
        checks.append((f"closed xi={xi:g}", np.allclose(closed, ref, atol=1e-12, rtol=0), str(closed)))
        checks += mc_checks(f"mc xi={xi:g}", mc_direct(spec, xi, T), closed, max_abs=0.01)
        checks += pde_checks(f"pde xi={xi:g}", pde.minimal_survival(spec, xi, T), closed)
    elapsed = time.perf_counter() - start
    checks.append(("runtime < 60 s", elapsed < 60.0, f"{elapsed:.1f} s"))
    criterion(1, "reciprocal BM: closed form vs mc-direct vs pde", checks)


def test_criterion_2_htransform(criterion):
    spec = builtin_catalog("htransform_power")
    xi, T = 1.0, (1.0, 2.0, 4.0)
    ref = [1 - math.exp(-2 / (xi * t)) for t in T]
    closed = cf.closed_form("htransform_power").curve(xi, T).estimate
    checks = [("closed", np.allclose(closed, ref, atol=1e-12, rtol=0), str(closed))]
    direct = mc_direct(spec, xi, T)
    checks += mc_checks("mc", direct, ref, max_abs=0.01)
    checks += pde_checks("pde", pde.minimal_survival(spec, xi, T), ref)

    # driftless companion on an independent stream
    vals = companion_terminal_values(spec, xi, SimConfig(n_paths=N_PATHS, seed=2, scheme="dds_exact", T_grid=T))
    for j, t in enumerate(T):
        col = vals[:, j]
        good = col[np.isfinite(col)]
        mean = good.mean() / xi
        se = good.std(ddof=1) / math.sqrt(good.size) / xi
        joint = math.hypot(se, direct.stderr[j])
        checks.append((f"companion identity T={t:g}", abs(mean - direct.estimate[j]) <= 3 * joint,
                       f"companion={mean:.5f} direct={direct.estimate[j]:.5f} joint_se={joint:.5f} "
                       f"nan={col.size - good.size}"))
    criterion(2, "h-transform: closed form, mc-direct, pde and the companion identity", checks)


def bm_exit_alternating(T, terms=60):
    # BM from the centre of (-pi/2, pi/2): sine-series exit survival
    k = np.arange(terms)
    return float(4 / math.pi * np.sum((-1.0) ** k / (2 * k + 1) * np.exp(-((2 * k + 1) ** 2) * T / 2)))


def test_criterion_3_quartic(criterion):
    T = (0.5, 1.0, 2.0)
    oracle = [bm_exit_alternating(t) for t in T]
    closed = [cf.quartic_survival(0.0, 0.0, t) for t in T]
    checks = [(f"series T={t:g}", abs(c - o) < 1e-4, f"closed={c:.7f} series={o:.7f}")
              for t, c, o in zip(T, closed, oracle)]
    checks += mc_checks("mc", mc_direct(builtin_catalog("quartic_tan", {"nu": 0.0}), 0.0, T), closed)
    criterion(3, "quartic tan model vs Brownian exit series and mc-direct", checks)


def test_criterion_4_bessel(criterion):
    T = (0.5, 1.0)
    checks = []
    for delta in (0.0, 1.0):
        spec = builtin_catalog("bessel", {"delta": delta})
        # hitting time of 0 from 1: 1/(2 tau) ~ Gamma(1 - delta/2)
        ref = [1 - gammaincc(1 - delta / 2, 1 / (2 * t)) for t in T]
        closed = [cf.bessel_lowdim_survival(delta, 1.0, t) for t in T]
        checks.append((f"closed delta={delta:g}", np.allclose(closed, ref, atol=1e-12, rtol=0), str(closed)))
        checks += pde_checks(f"pde delta={delta:g}", pde.minimal_survival(spec, 1.0, T), closed)
        checks += mc_checks(f"mc delta={delta:g}", mc_direct(spec, 1.0, T), closed)
    worst = 0.0
    for kappa in (1.0, 1.5, 2.0):
        for xi in (0.5, 1.0, 2.0):
            for t in (0.5, 1.0, 2.0):
                worst = max(worst, abs(cf.power_drift_survival(kappa, xi, t)
                                       - cf.bessel_lowdim_survival(3 - 2 * kappa, 1 / xi, t)))
    checks.append(("reciprocity bridge", worst < 1e-8, f"max gap {worst:.2e}"))
    criterion(4, "Bessel dimension < 2: closed form vs pde and mc-direct; reciprocity", checks)


def cubic_explosion_probability(nu, xi):
    # scale density x^(-3/2) exp(4 nu / sqrt x): P(reach +inf) = p(0, xi) / p(0, inf)
    dens = lambda x: x**-1.5 * math.exp(4 * nu / math.sqrt(x))
    return integrate.quad(dens, 0, xi)[0] / (integrate.quad(dens, 0, xi)[0] + integrate.quad(dens, xi, math.inf)[0])


def test_criterion_5_feller_classification(criterion):
    truth = {"reciprocal_bm": ("right",), "power_drift": ("right",), "htransform_power": ("right",),
             "affine_variance": ("left",), "quartic_tan": ("left", "right"), "cubic_drift": ("right",),
             "bessel": ("left",), "exp_drift": ("right",)}
    checks = []
    for name in catalog_names():
        spec = builtin_catalog(name)
        for method in ("auto", "general"):
            got = classify(spec, method=method).explosive_sides
            checks.append((f"{name} ({method})", got == truth[name], f"got {got}, want {truth[name]}"))
    got = classify(brownian()).explosive_sides
    checks.append(("brownian", got == (), f"got {got}"))
    checks.append(("catalog covers 8 models", len(CATALOG) == 8, str(len(CATALOG))))
    for nu, xi in ((-1.0, 4.0), (-0.5, 1.0)):
        target = math.exp(4 * nu / math.sqrt(xi))
        scale = cubic_explosion_probability(nu, xi)
        tail = 1 - cf.cubic_survival(nu, xi, 1e10)
        checks.append((f"cubic P(S<inf) nu={nu:g} xi={xi:g}", abs(scale - target) < 1e-8 and abs(tail - target) < 1e-4,
                       f"exp={target:.6f} scale={scale:.6f} closed(T=1e10)={tail:.6f}"))
    criterion(5, "Feller classification of the catalog and Brownian motion", checks)


def test_criterion_6_equivalences(criterion):
    lam, T = 1.0, (1.0,)
    checks = []
    for label, spec, xi in (("reciprocal_bm", builtin_catalog("reciprocal_bm"), 1.0), ("brownian", brownian(), 0.0)):
        non_explosive = classify(spec, anchor=xi).overall == "P(S=inf)=1"
        fk = estimate_survival_feynman_kac(spec, xi, SimConfig(n_paths=20_000, seed=3, scheme="dds_exact", T_grid=T))
        fk_one = abs(fk.estimate[0] - 1) <= 3 * fk.stderr[0] + 1e-12
        checks.append((f"{label} (iii) FK mean", fk_one == non_explosive,
                       f"mean={fk.estimate[0]:.5f} se={fk.stderr[0]:.5f} non_explosive={non_explosive}"))
        u_hat, _ = pde.minimal_resolvent(spec, xi, lam)
        res_one = abs(u_hat - 1 / lam) < PDE_TOL
        checks.append((f"{label} (iv) resolvent", res_one == non_explosive, f"u_hat={u_hat:.5f}"))
        u = pde.minimal_survival(spec, xi, T).estimate[0]
        pde_one = abs(u - 1) < PDE_TOL
        checks.append((f"{label} (v) pde minimal", pde_one == non_explosive, f"U={u:.5f}"))
    criterion(6, "FK mean, resolvent and minimal solution track the explosion flag", checks)


def test_criterion_7_laplace_consistency(criterion):
    lam = 1.0
    T = np.linspace(0.02, 12.0, 600)
    checks = []
    recip = builtin_catalog("reciprocal_bm")
    oracle = 1 - math.exp(-math.sqrt(2 * lam))
    u_hat, _ = pde.minimal_resolvent(recip, 1.0, lam)
    checks.append(("reciprocal resolvent vs oracle", abs(u_hat - oracle) < PDE_TOL, f"{u_hat:.6f} vs {oracle:.6f}"))
    r = pde.laplace_consistency(pde.minimal_survival(recip, 1.0, T), oracle, lam)
    checks.append(("reciprocal Laplace residual", r < 1e-2, f"{r:.2e}"))
    h = builtin_catalog("htransform_power")
    u_hat, _ = pde.minimal_resolvent(h, 1.0, lam)
    r = pde.laplace_consistency(pde.minimal_survival(h, 1.0, T), u_hat, lam)
    checks.append(("h-transform Laplace residual", r < 1e-2, f"{r:.2e}"))
    criterion(7, "Laplace transform of the survival curve equals the resolvent", checks)


def _holds(prop):
    try:
        prop()
    except AssertionError as exc:
        return False, str(exc).splitlines()[0] if str(exc) else "assertion failed"
    return True, ""


def test_criterion_8_property_suites(criterion):
    checks = []

    @settings(max_examples=6, deadline=None)
    @given(xi=st.floats(0.3, 3.0), T=st.floats(0.2, 2.0))
    def pde_levels(xi, T):
        spec = builtin_catalog("reciprocal_bm")
        lad = default_ladder(spec.interval, 5, anchor=xi)
        vals = [pde.solve_truncated_cauchy(spec, n, 200, 100, T, ladder=lad).at(xi, [T])[0] for n in range(1, 6)]
        assert np.all(np.diff(vals) >= -1e-3), vals

    @settings(max_examples=5, deadline=None)
    @given(seed=st.integers(0, 2**32), xi=st.floats(0.3, 3.0))
    def curve_bounds(seed, xi):
        T = np.linspace(0.1, 3.0, 12)
        curves = [mc_direct(builtin_catalog("reciprocal_bm"), xi, tuple(T), seed=seed, n=2000),
                  cf.closed_form("reciprocal_bm").curve(xi, T),
                  pde.minimal_survival(builtin_catalog("reciprocal_bm"), xi, T, space_nodes=200, time_nodes=200)]
        for c in curves:
            assert isinstance(c, SurvivalCurve)
            assert np.all((c.estimate >= 0) & (c.estimate <= 1)), c.method
            assert np.all(np.diff(c.estimate) <= 1e-9), c.method

    @settings(max_examples=25, deadline=None)
    @given(name=st.sampled_from(catalog_names()), x=st.floats(0.2, 5.0))
    def derivatives(name, x):
        entry = CATALOG[name]
        for source in (entry.s, entry.b):
            ast = ex.parse(source, set(entry.defaults))
            d = ex.evaluate(ex.differentiate(ast), x, entry.defaults)
            h = 1e-5 * max(1.0, x)
            fd = (ex.evaluate(ast, x + h, entry.defaults) - ex.evaluate(ast, x - h, entry.defaults)) / (2 * h)
            assert abs(d - fd) <= 1e-5 * (1 + abs(d)), (source, x, d, fd)

    @settings(max_examples=25, deadline=None)
    @given(name=st.sampled_from(catalog_names()), u=st.floats(-3.0, 3.0))
    def round_trips(name, u):
        spec = builtin_catalog(name)
        frame = LampertiFrame(spec)
        x = math.exp(u) if spec.interval.left == 0.0 else u
        back = lamperti_inverse(frame, lamperti_map(frame, x))
        assert abs(back - x) <= 1e-8 * max(1.0, abs(x)), (name, x, back)

    @settings(max_examples=3, deadline=None)
    @given(seed=st.integers(0, 2**64 - 1))
    def reproducible(seed):
        spec = builtin_catalog("htransform_power")
        runs = [estimate_survival_direct(spec, 1.0, SimConfig(n_paths=3000, seed=seed, scheme="dds_exact",
                                                              T_grid=(0.5, 1.0), threads=k)) for k in (1, 1, 4)]
        for c in runs[1:]:
            assert np.array_equal(c.estimate, runs[0].estimate) and np.array_equal(c.stderr, runs[0].stderr)
        cfg = SimConfig(n_paths=1000, seed=seed, scheme="dds_exact", T_grid=(1.0,))
        a, b = companion_terminal_values(spec, 1.0, cfg), companion_terminal_values(spec, 1.0, cfg)
        assert np.array_equal(a, b, equal_nan=True)

    for label, prop in (("truncated PDE monotone in level", pde_levels),
                        ("survival curves bounded and nonincreasing", curve_bounds),
                        ("expression derivatives vs finite differences", derivatives),
                        ("Lamperti round trips", round_trips),
                        ("bitwise MC reproducibility", reproducible)):
        ok, detail = _holds(prop)
        checks.append((label, ok, detail))
    criterion(8, "property suites", checks)
