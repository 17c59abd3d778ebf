import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import rho_reference
from volbracket.mollify import cutoff, rho, sigma_profile, smooth_ramp, smoothstep_a


def test_rho_matches_exponential_form():
    for t in np.linspace(0.01, 0.99, 197):
        for lam in (1.0, 30.0):
            assert rho(t, lam) == pytest.approx(rho_reference(t, lam), rel=1e-12, abs=1e-300)


def test_rho_outside_unit_interval():
    assert rho(-0.5) == 0.0 and rho(0.0) == 0.0
    assert rho(1.0) == 1.0 and rho(3.0) == 1.0


def test_rho_symmetry():
    # dyadic t keeps 1 - t exact, isolating the profile's own symmetry
    t = np.arange(1, 4096) / 4096
    for lam in (1.0, 30.0):
        assert np.max(np.abs(rho(t, lam) + rho(1 - t, lam) - 1)) <= 1e-15
    u = np.random.default_rng(3).uniform(0, 1, 5000)
    assert np.max(np.abs(rho(u) + rho(1 - u) - 1)) <= 1e-15


class TestSmoothstep:
    def test_endpoints_exact(self):
        assert smoothstep_a(0.0) == 0.0 and smoothstep_a(1.0) == 1.0

    def test_half(self):
        assert smoothstep_a(0.5) == 0.5

    def test_identity_near_half(self):
        t = np.linspace(0.4, 0.6, 2001)
        assert np.max(np.abs(smoothstep_a(t, 30.0) - t)) <= 1e-12

    @pytest.mark.parametrize("t", [1e-3, 1 - 1e-3])
    def test_flat_at_endpoints(self, t):
        h = 1e-6
        slope = (smoothstep_a(t + h) - smoothstep_a(t - h)) / (2 * h)
        assert abs(slope) <= 1e-8

    def test_monotone(self):
        t = np.linspace(0, 1, 20001)
        assert np.all(np.diff(smoothstep_a(t)) >= 0)

    def test_reflection(self):
        t = np.linspace(0, 1, 1000)
        assert np.max(np.abs(smoothstep_a(t) + smoothstep_a(1 - t) - 1)) <= 1e-12

    @pytest.mark.parametrize("t", [-1e-9, 1.5, float("nan")])
    def test_domain(self, t):
        with pytest.raises(ValueError):
            smoothstep_a(t)

    def test_lambda_positive(self):
        with pytest.raises(ValueError):
            smoothstep_a(0.3, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_smoothstep_order_preserving(s, t):
    lo, hi = min(s, t), max(s, t)
    assert smoothstep_a(lo) <= smoothstep_a(hi)


def test_cutoff_plateaus():
    r = np.linspace(0, 1, 1001)
    c = cutoff(r, 0.2, 0.4)
    assert np.all(c[r <= 0.2] == 0) and np.all(c[r >= 0.4] == 1)
    assert np.all(np.diff(c) >= 0)


def test_smooth_ramp_bounds():
    t = np.linspace(-1, 1, 4001)
    w = 0.05
    r = smooth_ramp(t, w)
    assert np.all(r <= np.maximum(t, 0) + 1e-15)
    assert np.all(r >= t - w)
    assert np.all(r[t >= w] == t[t >= w]) and np.all(r[t <= 0] == 0)


@pytest.mark.parametrize("n", [2, 3])
def test_sigma_plateau(n):
    top = math.sqrt(n) + 1
    assert np.all(sigma_profile(np.linspace(0, 0.1, 50), n) == 0)
    assert np.all(sigma_profile(np.linspace(1 / 9, top, 500), n) == 1)
    assert np.all(sigma_profile(np.linspace(top + 1, top + 5, 50), n) == 0)
