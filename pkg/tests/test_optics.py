import cmath
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfqkd.optics import (
    CoherentBin, click_probability, interfere_at_bs, phase_difference, port_intensities,
    predict_pattern, wrap_phase,
)
from tfqkd.protocol import EncodingBits, encode_frame

mus = st.floats(0.0, 50.0, allow_nan=False)
phases = st.floats(-20.0, 20.0, allow_nan=False)


def field_oracle(mu_a, mu_b, dphi):
    # complex amplitudes through a 50:50 coupler, |E|^2 = mean photon number
    ea = math.sqrt(mu_a) * cmath.exp(1j * dphi)
    eb = math.sqrt(mu_b)
    return abs((ea + eb) / math.sqrt(2)) ** 2, abs((ea - eb) / math.sqrt(2)) ** 2


@given(mus, mus, phases)
def test_ideal_ports_match_field_amplitudes(mu_a, mu_b, dphi):
    c, d = port_intensities(mu_a, mu_b, dphi)
    oc, od = field_oracle(mu_a, mu_b, dphi)
    assert c == pytest.approx(oc, rel=1e-9, abs=1e-9)
    assert d == pytest.approx(od, rel=1e-9, abs=1e-9)


@given(mus, mus, phases, st.floats(0.0, 1.0))
def test_energy_conserved_for_any_contrast(mu_a, mu_b, dphi, v):
    c, d = port_intensities(mu_a, mu_b, dphi, v)
    assert c >= 0 and d >= 0
    assert c + d == pytest.approx(mu_a + mu_b, rel=1e-12, abs=1e-12)


def test_phase_examples():
    r = interfere_at_bs(CoherentBin(1.0, 0.0), CoherentBin(1.0, 0.0))
    assert (r.constructive, r.destructive) == (2.0, 0.0)
    r = interfere_at_bs(CoherentBin(1.0, math.pi), CoherentBin(1.0, 0.0))
    assert r.constructive == pytest.approx(0.0, abs=1e-15)
    assert r.destructive == pytest.approx(2.0)
    r = interfere_at_bs(CoherentBin(1.0, math.pi / 2), CoherentBin(1.0, 0.0))
    assert r.constructive == pytest.approx(1.0) and r.destructive == pytest.approx(1.0)


def test_contrast_leaves_floor_in_dark_port():
    c, d = port_intensities(1.0, 1.0, 0.0, 0.9)
    assert (c - d) / (c + d) == pytest.approx(0.9)


@given(st.floats(0.0, 1e3), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=200)
def test_click_probability_matches_mpmath(mu, eta, p):
    mpmath.mp.dps = 40
    ref = 1 - (1 - mpmath.mpf(p)) * mpmath.exp(-mpmath.mpf(eta) * mpmath.mpf(mu))
    got = click_probability(mu, eta, p)
    assert 0.0 <= got <= 1.0
    assert abs(got - float(ref)) <= 1e-15 + 1e-13 * float(ref)


def test_click_probability_edges():
    assert click_probability(0.0, 0.1, 0.0) == 0.0
    assert click_probability(0.0, 0.1, 1e-5) == 1e-5
    assert click_probability(1e-12, 0.5, 0.0) == pytest.approx(5e-13, rel=1e-9)
    with pytest.raises(ValueError):
        click_probability(-1.0, 0.1, 0.0)
    with pytest.raises(ValueError):
        click_probability(1.0, 1.5, 0.0)


@given(st.floats(0.0, 10.0), st.floats(0.0, 10.0), st.floats(0.01, 1.0), st.floats(0.0, 0.1))
def test_click_probability_monotone_in_mu(mu1, mu2, eta, p):
    lo, hi = sorted((mu1, mu2))
    assert click_probability(lo, eta, p) <= click_probability(hi, eta, p)


@given(phases)
def test_wrap_phase_range(x):
    w = wrap_phase(x)
    assert 0.0 <= w < 2 * math.pi
    assert math.cos(w) == pytest.approx(math.cos(x), abs=1e-9)
    d = phase_difference(x, 0.0)
    assert -math.pi < d <= math.pi


def test_coherent_bin_validation():
    assert CoherentBin(0.5, 3 * math.pi).phase == pytest.approx(math.pi)
    with pytest.raises(ValueError):
        CoherentBin(-0.1)
    with pytest.raises(ValueError):
        CoherentBin(1.0, float("nan"))


def test_predict_pattern_for_test_sequence():
    fa = encode_frame(EncodingBits(0, 0), 1.0)
    fb = encode_frame(EncodingBits(0, 1), 1.0)
    out = predict_pattern(fa, fb)
    assert [round(p.constructive, 12) for p in out] == [2.0, 2.0, 0.0]
    assert [round(p.destructive, 12) for p in out] == [0.0, 0.0, 2.0]
    with pytest.raises(ValueError):
        predict_pattern(fa, encode_frame(EncodingBits(0, 1), 2.0))


def test_vectorised_ports_shape():
    c, d = port_intensities(np.ones((4, 3)), 1.0, np.zeros(3))
    assert c.shape == d.shape == (4, 3)
