import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from explosiontime.model import Interval, builtin_catalog, default_ladder, make_spec
from explosiontime.montecarlo import (
    SchemeUnavailableError,
    SimConfig,
    SurvivalCurve,
    companion_terminal_values,
    estimate_survival_direct,
    estimate_survival_feynman_kac,
    simulate_natural_scale,
    simulate_path,
)
from explosiontime import rng

REAL = Interval(-math.inf, math.inf)
POS = Interval(0.0, math.inf)


def recip_survival(xi, T):
    return erf(1.0 / (xi * math.sqrt(2.0 * T)))


def within(curve, oracle, k=3.0):
    oracle = np.asarray(oracle, float)
    return np.all(np.abs(curve.estimate - oracle) <= k * curve.stderr + 1e-12)


# -- random numbers ---------------------------------------------------------------


def test_rng_is_a_pure_function_of_its_key():
    a = rng.normals(7, np.arange(10), np.full(10, 3), 0)
    b = rng.normals(7, np.arange(10)[::-1], np.full(10, 3), 0)[::-1]
    assert np.array_equal(a, b)
    assert not np.array_equal(a, rng.normals(7, np.arange(10), np.full(10, 3), 1))


def test_rng_moments():
    z = rng.normals(1, np.arange(200000), np.zeros(200000, dtype=np.uint64))
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.01
    u = rng.uniforms(1, np.arange(200000), np.ones(200000, dtype=np.uint64), 2)
    assert 0.0 < u.min() and u.max() < 1.0


# -- single paths -----------------------------------------------------------------


def test_brownian_path_is_xi_plus_increments():
    spec = make_spec(REAL, "1", "0")
    cfg = SimConfig(step=2.0**-5, T_grid=(1.0,), scheme="euler_raw", seed=4)
    path = simulate_path(spec, 0.3, cfg, path_index=2)
    assert not path.exploded and math.isinf(path.explosion_time)
    assert np.allclose(path.states, 0.3 + path.brownian, atol=1e-14)
    # increments are sqrt(dt) times the keyed normal of each step (steps halve past level 1)
    k = path.times.size - 1
    z = rng.normals(4, np.full(k, 2, dtype=np.uint64), np.arange(k, dtype=np.uint64), 0)
    assert np.allclose(np.diff(path.brownian), np.sqrt(np.diff(path.times)) * z, atol=1e-14)
    assert path.times[-1] == 1.0


@pytest.mark.parametrize("xi", [0.7, 1.0, 2.0])
def test_reciprocal_explodes_when_w_hits_level(xi):
    spec = builtin_catalog("reciprocal_bm")
    cfg = SimConfig(T_grid=(3.0,), scheme="dds_exact", seed=1)
    for k in range(5):
        path = simulate_path(spec, xi, cfg, path_index=k)
        alive = slice(None) if not path.exploded else slice(None, len(path.states))
        assert np.allclose(path.states[alive], 1.0 / (path.brownian[alive] + 1.0 / xi), rtol=1e-9)
        if path.exploded:
            assert path.brownian.min() > -1.0 / xi
            assert path.explosion_time >= path.times[-1]
            assert not path.censored


def test_affine_variance_driftless_dds_is_a_square():
    # X = (kappa W / 2 + sqrt(xi))^2 for the driftless companion; explosion = hit of -2 sqrt(xi)/kappa
    kappa, xi = 2.0, 1.0
    spec = builtin_catalog("affine_variance", {"kappa": kappa})  # b = s'/2: zero drift in the DDS form
    cfg = SimConfig(T_grid=(2.0,), scheme="dds_exact", seed=9)
    hit = 0
    for k in range(6):
        p = simulate_path(spec, xi, cfg, path_index=k)
        assert np.allclose(p.states, (kappa * p.brownian / 2.0 + math.sqrt(xi)) ** 2, rtol=1e-8, atol=1e-10)
        hit += p.exploded
        if p.exploded:
            assert p.brownian.min() > -2.0 * math.sqrt(xi) / kappa
    assert hit > 0


def test_path_stays_in_level_before_exit():
    spec = builtin_catalog("cubic_drift", {"nu": 0.0})
    lad = default_ladder(spec.interval, 12, anchor=1.0)
    cfg = SimConfig(T_grid=(2.0,), seed=2, ladder=lad)
    for k in range(4):
        p = simulate_path(spec, 1.0, cfg, path_index=k)
        finite = p.level_exit_times[np.isfinite(p.level_exit_times)]
        assert np.all(np.diff(finite) >= 0)
        for n, t_exit in enumerate(p.level_exit_times, start=1):
            lo, hi = lad.level(n)
            before = p.times < t_exit
            assert np.all((p.states[before] > lo) & (p.states[before] < hi))
        if p.exploded:
            assert p.explosion_time >= p.times[-1]


def test_scheme_availability():
    spec = make_spec(POS, "x^2", "1", differentiable_s=False)
    cfg = SimConfig(scheme="dds_exact", T_grid=(1.0,))
    with pytest.raises(SchemeUnavailableError):
        simulate_path(spec, 1.0, cfg)
    with pytest.raises(SchemeUnavailableError):
        simulate_path(builtin_catalog("cubic_drift"), 1.0, SimConfig(scheme="timechange_natural"))
    # raw Euler needs no derivative
    assert simulate_path(spec, 1.0, SimConfig(scheme="euler_raw", T_grid=(0.1,))).times[-1] <= 0.1


# -- natural scale ----------------------------------------------------------------


def test_natural_scale_identity_time_change():
    spec = make_spec(REAL, "1", "0")
    cfg = SimConfig(step=2.0**-6, seed=3)
    p = simulate_natural_scale(spec, 0.5, 1.0, cfg)
    assert np.allclose(p.states, 0.5 + p.brownian, atol=1e-14)
    assert np.all(np.diff(p.times) > 0)
    assert not p.exploded


def test_natural_scale_reciprocal_never_explodes():
    # only the ladder truncation can stop a path: reaching the last level is a censored event
    spec = make_spec(POS, "-x^2", "0")
    cfg = SimConfig(n_paths=2000, seed=5, scheme="timechange_natural", T_grid=(0.5, 1.0, 2.0))
    curve = estimate_survival_direct(spec, 1.0, cfg)
    assert np.all(1.0 - curve.estimate == curve.censored_fraction)
    assert np.all(curve.estimate >= 0.995)


def test_natural_scale_strict_local_martingale_deficit():
    spec = make_spec(REAL, "1 + x^2", "0")
    cfg = SimConfig(n_paths=100000, seed=8, scheme="timechange_natural", T_grid=(1.0,))
    x = companion_terminal_values(spec, 1.0, cfg)[:, 0]
    assert np.isnan(x).sum() < 50  # level-censored paths carry no value
    x = x[np.isfinite(x)]
    # a true martingale would keep the mean at xi = 1
    se = x.std(ddof=1) / math.sqrt(x.size)
    assert x.mean() < 1.0 - 3.0 * se


# -- direct estimator -------------------------------------------------------------


def test_brownian_curve_is_identically_one():
    spec = make_spec(REAL, "1", "0")
    curve = estimate_survival_direct(spec, 0.0, SimConfig(n_paths=500, T_grid=(0.5, 1.0)))
    assert np.all(curve.estimate == 1.0) and np.all(curve.stderr == 0.0)


def test_reciprocal_direct_matches_closed_form():
    spec = builtin_catalog("reciprocal_bm")
    T = (0.5, 1.0, 2.0)
    cfg = SimConfig(n_paths=40000, seed=12, scheme="dds_exact", T_grid=T)
    curve = estimate_survival_direct(spec, 1.0, cfg)
    assert within(curve, [recip_survival(1.0, t) for t in T])
    assert np.all(curve.censored_fraction == 0.0)


def test_htransform_direct_matches_closed_form():
    spec = builtin_catalog("htransform_power")
    cfg = SimConfig(n_paths=20000, seed=13, T_grid=(2.0,))
    curve = estimate_survival_direct(spec, 1.0, cfg)
    assert within(curve, [1.0 - math.exp(-1.0)])


def test_cubic_direct_is_not_level_censored():
    # the explosive end maps to a finite Lamperti boundary, so explosions are observed hits
    spec = builtin_catalog("cubic_drift", {"nu": 0.0})
    curve = estimate_survival_direct(spec, 4.0, SimConfig(n_paths=20000, seed=4, T_grid=(1.0,)))
    assert np.all(curve.censored_fraction == 0.0)
    assert within(curve, [erf(1.0 / math.sqrt(2.0))])


def test_level_estimates_nondecreasing_in_level():
    spec = builtin_catalog("exp_drift")
    curve = estimate_survival_direct(spec, 0.0, SimConfig(n_paths=4000, seed=6, T_grid=(0.25, 0.5, 1.0)))
    lv = curve.level_estimates
    assert np.all(np.diff(lv, axis=0) >= 0.0)
    assert np.allclose(lv[-1], curve.estimate)


def test_curve_is_reproducible_across_threads_and_chunks(monkeypatch):
    import explosiontime.montecarlo as mc

    spec = builtin_catalog("quartic_tan", {"nu": 0.3})
    cfg = SimConfig(n_paths=3000, seed=21, T_grid=(0.5, 1.0), threads=1)
    a = estimate_survival_direct(spec, 0.2, cfg)
    monkeypatch.setattr(mc, "CHUNK", 700)
    b = estimate_survival_direct(spec, 0.2, SimConfig(n_paths=3000, seed=21, T_grid=(0.5, 1.0), threads=4))
    assert np.array_equal(a.estimate, b.estimate)
    assert np.array_equal(a.level_estimates, b.level_estimates)


def test_different_seeds_differ():
    spec = builtin_catalog("reciprocal_bm")
    a = estimate_survival_direct(spec, 1.0, SimConfig(n_paths=2000, seed=1, scheme="dds_exact"))
    b = estimate_survival_direct(spec, 1.0, SimConfig(n_paths=2000, seed=2, scheme="dds_exact"))
    assert not np.array_equal(a.estimate, b.estimate)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.3, 3.0), st.integers(0, 2**32))
def test_curve_in_unit_interval_and_monotone(xi, seed):
    spec = builtin_catalog("reciprocal_bm")
    cfg = SimConfig(n_paths=400, seed=seed, scheme="dds_exact", T_grid=(0.25, 0.5, 1.0, 2.0))
    curve = estimate_survival_direct(spec, xi, cfg)
    assert np.all((curve.estimate >= 0) & (curve.estimate <= 1))
    # common random numbers: the direct curve is exactly nonincreasing
    assert np.all(np.diff(curve.estimate) <= 0)


# -- weighted estimator -----------------------------------------------------------


def test_fk_weight_mean_is_one_without_explosion():
    spec = make_spec(REAL, "1", "1")
    curve = estimate_survival_feynman_kac(spec, 0.0, SimConfig(n_paths=20000, seed=3, T_grid=(1.0,)))
    assert within(curve, [1.0])


def test_fk_reciprocal_matches_closed_form():
    spec = builtin_catalog("reciprocal_bm")
    curve = estimate_survival_feynman_kac(spec, 1.0, SimConfig(n_paths=20000, seed=5, T_grid=(1.0,)))
    assert curve.excluded == 0
    assert within(curve, [recip_survival(1.0, 1.0)])


def test_fk_bessel_dimension_one():
    spec = builtin_catalog("bessel", {"delta": 1.0})
    curve = estimate_survival_feynman_kac(spec, 1.0, SimConfig(n_paths=20000, seed=7, T_grid=(1.0,)))
    assert within(curve, [erf(1.0 / math.sqrt(2.0))])


def test_girsanov_route_agrees_with_fk():
    spec = builtin_catalog("reciprocal_bm")
    cfg = SimConfig(n_paths=20000, seed=5, T_grid=(1.0,))
    g = estimate_survival_feynman_kac(spec, 1.0, cfg, route="girsanov")
    assert within(g, [recip_survival(1.0, 1.0)])


def test_htransform_identity():
    spec = builtin_catalog("htransform_power")
    T = (1.0, 2.0)
    direct = estimate_survival_direct(spec, 1.0, SimConfig(n_paths=20000, seed=31, T_grid=T))
    x = companion_terminal_values(spec, 1.0, SimConfig(n_paths=20000, seed=32, T_grid=T))
    mean = x.mean(axis=0)
    se = x.std(axis=0, ddof=1) / math.sqrt(x.shape[0])
    joint = np.sqrt(se**2 + direct.stderr**2)
    assert np.all(np.abs(direct.estimate - mean) <= 3.0 * joint)
    assert np.all(mean < 1.0)


# -- serialization ----------------------------------------------------------------


def test_csv_round_trip():
    curve = SurvivalCurve(
        np.array([0.5, 1.0]), np.array([0.9, 0.123456789012345678]), np.array([0.01, 0.02]),
        "mc-direct:dds_exact", 100, np.array([0.0, 0.1]),
    )
    text = curve.to_csv(comment="seed=1")
    assert text.startswith("# seed=1")
    back = SurvivalCurve.from_csv(text)
    assert np.array_equal(back.estimate, curve.estimate)
    assert np.array_equal(back.T, curve.T)
    assert back.method == curve.method and back.n_paths == 100
    buf = io.StringIO()
    curve.to_csv(buf)
    assert buf.getvalue().splitlines()[0].split(",")[:3] == ["T", "estimate", "stderr"]


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(step=0.0)
    with pytest.raises(ValueError):
        SimConfig(T_grid=(1.0, 0.5))
    with pytest.raises(ValueError):
        SimConfig(n_paths=0)
    with pytest.raises(ValueError):
        SimConfig(scheme="leapfrog")
