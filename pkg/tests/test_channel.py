import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from tfqkd.channel import (
    SPEED_OF_LIGHT, BackscatterParams, Disturbance, FiberSpec, PhaseDriftProcess,
    backscatter_click_probability, loop_delay, one_way_delay, sagnac_residual_phase, transmittance,
)


def test_transmittance_examples():
    assert transmittance(FiberSpec(0.0)) == 1.0
    assert transmittance(FiberSpec(50.0)) == pytest.approx(0.1, rel=1e-15)
    assert transmittance(FiberSpec(100.0)) == pytest.approx(0.01, rel=1e-15)


@given(st.floats(0, 300), st.floats(0, 300), st.floats(0.1, 0.4))
def test_transmittance_multiplies(l1, l2, a):
    t = transmittance(FiberSpec(l1 + l2, a))
    assert t == pytest.approx(transmittance(FiberSpec(l1, a)) * transmittance(FiberSpec(l2, a)), rel=1e-12)


def test_fiber_validation():
    with pytest.raises(ValueError):
        FiberSpec(-1.0)
    with pytest.raises(ValueError):
        FiberSpec(1.0, float("inf"))


def test_loop_delay():
    assert one_way_delay(1.0) == pytest.approx(1e3 * 1.468 / SPEED_OF_LIGHT)
    assert loop_delay(FiberSpec(50.0), FiberSpec(0.0)) == pytest.approx(2 * 50e3 * 1.468 / SPEED_OF_LIGHT)
    assert loop_delay(FiberSpec(0.0), FiberSpec(0.0)) == 0.0


def test_backscatter_operating_point():
    p = backscatter_click_probability(BackscatterParams(), FiberSpec(50.0))
    assert p == pytest.approx(6.75e-5, rel=1e-12)
    assert backscatter_click_probability(BackscatterParams(), FiberSpec(0.0)) == 0.0
    assert backscatter_click_probability(BackscatterParams(beta=0.0), FiberSpec(50.0)) == 0.0


def test_backscatter_matches_mpmath_grid():
    rng = np.random.default_rng(11)
    mpmath.mp.dps = 50
    for _ in range(100):
        n, mu, beta, t_on, eta_d = rng.uniform([1e6, 1, 1e-6, 1e-9, 0.01], [1e8, 100, 1e-3, 1e-8, 1.0])
        length, alpha = rng.uniform([0, 0.15], [200, 0.35])
        bp = BackscatterParams(n, mu, beta, t_on, eta_d)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            got = backscatter_click_probability(bp, FiberSpec(length, alpha))
        eta = mpmath.power(10, -mpmath.mpf(alpha) * mpmath.mpf(length) / 10)
        ref = 2 * (1 - eta) * mpmath.mpf(n) * mpmath.mpf(mu) * mpmath.mpf(beta) * mpmath.mpf(t_on) * mpmath.mpf(eta_d)
        ref = min(ref, mpmath.mpf(1))
        assert abs(got - float(ref)) <= 1e-10 * float(ref) + 1e-300


def test_backscatter_clamps_with_warning():
    with pytest.warns(RuntimeWarning):
        assert backscatter_click_probability(BackscatterParams(mean_photons_out=1000.0, beta=1.0), FiberSpec(50.0)) == 1.0


def test_backscatter_increases_with_length():
    ps = [backscatter_click_probability(BackscatterParams(), FiberSpec(l)) for l in (0, 10, 20, 50, 100)]
    assert all(a < b for a, b in zip(ps, ps[1:]))


def test_drift_increment_statistics():
    # Var[w(t) - w(t - tau)] = D^2 tau, independent of t
    d, tau = 5.0, 1e-3
    p = PhaseDriftProcess(d, seed=3)
    t = np.arange(1, 20001) * 0.01  # increments far apart are independent
    r = sagnac_residual_phase(p, tau, t)
    var = r.var()
    expected = d * d * tau
    # chi-square: relative SE of a variance estimate is sqrt(2/n)
    assert abs(var / expected - 1) < 4 * math.sqrt(2 / t.size)
    assert abs(r.mean()) < 4 * math.sqrt(expected / t.size)


def test_brownian_bridge_fills_gaps_consistently():
    # the bridge path between two knots must have the Wiener covariance:
    # sample many processes anchored at 0 and 1, fill in t = 0.25
    d = 2.0
    vals = []
    ends = []
    for s in range(4000):
        p = PhaseDriftProcess(d, seed=s)
        p.drift_at([0.0, 1.0])
        vals.append(p.drift_at(0.25))
        ends.append(p.drift_at(1.0))
    vals, ends = np.array(vals), np.array(ends)
    # w(0.25) ~ N(0, 0.25 d^2); Cov(w(0.25), w(1)) = 0.25 d^2
    n = vals.size
    assert abs(vals.var() / (0.25 * d * d) - 1) < 4 * math.sqrt(2 / n)
    cov = np.mean(vals * ends)
    assert abs(cov - 0.25 * d * d) < 4 * d * d * 0.25 * math.sqrt(5 / n)


def test_drift_deterministic_and_query_stable():
    p1 = PhaseDriftProcess(3.0, seed=42)
    p2 = PhaseDriftProcess(3.0, seed=42)
    t = np.linspace(0, 1, 50)
    assert np.array_equal(p1.drift_at(t), p2.drift_at(t))
    # repeated queries return the already-realised values
    assert np.array_equal(p1.drift_at(t[::-1]), p1.drift_at(t)[::-1])
    assert p1.current_phase == p1.drift_at(1.0)


def test_zero_drift_and_zero_delay():
    p = PhaseDriftProcess(0.0, seed=1)
    assert np.all(sagnac_residual_phase(p, 1e-3, np.linspace(0, 1, 10)) == 0.0)
    p = PhaseDriftProcess(10.0, seed=1)
    assert sagnac_residual_phase(p, 0.0, 0.5) == 0.0


def test_disturbance_schedule():
    p = PhaseDriftProcess(0.0, [Disturbance(1.0, 2.0, math.pi)], seed=0)
    got = sagnac_residual_phase(p, 1e-3, np.array([0.5, 1.0, 1.5, 2.0]))
    assert np.allclose(got, [0.0, math.pi, math.pi, 0.0])
    with pytest.raises(ValueError):
        PhaseDriftProcess(0.0, [Disturbance(0.0, 2.0), Disturbance(1.0, 3.0)])
    with pytest.raises(ValueError):
        Disturbance(2.0, 1.0)
