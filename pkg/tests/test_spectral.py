import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy import stats

from immp.spectral import (
    asymptotic_moments,
    critical_dt_scaling_exponent,
    critical_timestep,
    energy_variation_moments,
    gaussian_acceptance,
    h_mode,
    leapfrog_matrix,
    mode_stability,
    predicted_acceptance,
    predicted_critical_dt,
    sample_energy_variation,
)


def test_h_mode_examples():
    assert_allclose(h_mode(0.1, 2, 0.0, 1), 0.1 * np.sqrt(8), rtol=1e-14)
    assert_allclose(h_mode(0.3, 50, 0.0, 7), 0.3 * np.sqrt(4 * 2500 * np.sin(7 * np.pi / 100) ** 2), rtol=1e-14)
    big = h_mode(0.2, 64, 1e6, np.arange(1, 64))
    assert_allclose(big, 0.2 / 1e6, rtol=1e-6)


def test_critical_timestep_examples():
    assert_allclose(critical_timestep(2, 0.0), 1 / np.sqrt(2), rtol=1e-14)
    assert abs(critical_timestep(10**6, 1.0) - 2.0) < 1e-6
    with pytest.raises(ValueError):
        critical_timestep(1, 0.0)


@pytest.mark.parametrize("nubar", [0.0, 0.3, 2.0])
def test_critical_timestep_is_mode_bound(nubar):
    N = 64
    dtc = critical_timestep(N, nubar)
    assert_allclose(h_mode(dtc, N, nubar, N - 1), 2.0, rtol=1e-12)
    assert all(mode_stability(0.999 * dtc, N, nubar, k).stable for k in range(1, N))
    assert not mode_stability(1.001 * dtc, N, nubar, N - 1).stable


@settings(max_examples=100, deadline=None)
@given(h=st.floats(0.0, 10.0))
def test_leapfrog_matrix_symplectic(h):
    L = leapfrog_matrix(h)
    assert abs(np.linalg.det(L) - 1.0) <= 1e-12 * max(1.0, np.abs(L).max() ** 2)
    assert (abs(np.trace(L)) <= 2.0) == (h <= 2.0)


def test_moment_examples():
    assert energy_variation_moments(64, 0.0, 0.3) == (0.0, 0.0)
    h = 0.1 * np.sqrt(8)
    m, v = energy_variation_moments(2, 0.1, 0.0)
    assert_allclose(m, h**6 / 32, rtol=1e-14)
    assert_allclose(v, h**6 / 16 + h**12 / 512, rtol=1e-14)


@pytest.mark.parametrize("nubar,dt", [(0.0, 0.004), (0.3, 0.35)])
def test_moments_match_monte_carlo(nubar, dt):
    N = 64
    x = sample_energy_variation(N, dt, nubar, 100000, np.random.default_rng(5))
    m, v = energy_variation_moments(N, dt, nubar)
    n = x.size
    assert abs(x.mean() - m) <= 3 * np.sqrt(v / n)
    c = x - x.mean()
    se_var = np.sqrt((np.mean(c**4) - np.mean(c**2) ** 2) / n)
    assert abs(x.var() - v) <= 3 * se_var


def test_asymptotic_forms():
    N = 512
    dt = N ** (-1 / 6) / 10
    m, v = energy_variation_moments(N, dt, 1.0)
    ma, va = asymptotic_moments(N, dt, 1.0)
    assert abs(m / ma - 1) < 0.05 and abs(v / va - 1) < 0.05
    m0, v0 = energy_variation_moments(N, 1e-4, 0.0)
    ma0, va0 = asymptotic_moments(N, 1e-4, 0.0)
    assert abs(m0 / ma0 - 1) < 0.05 and abs(v0 / va0 - 1) < 0.05
    # Riemann-sum constant: sum_k sin^6 ~ N * 5/16
    k = np.arange(1, N)
    assert abs(np.sum(np.sin(k * np.pi / (2 * N)) ** 6) / (5 * N / 16) - 1) < 0.01


def test_scaling_exponents():
    assert critical_dt_scaling_exponent("penalized") == pytest.approx(1 / 6)
    assert critical_dt_scaling_exponent("verlet") == pytest.approx(7 / 6)
    assert critical_dt_scaling_exponent(0.1) == pytest.approx(1 / 6)
    assert critical_dt_scaling_exponent(0.0) == pytest.approx(7 / 6)
    assert abs(critical_dt_scaling_exponent("penalized") - 0.2) <= 0.1
    assert abs(critical_dt_scaling_exponent("verlet") - 1.2) <= 0.1


def test_energy_variation_is_nearly_gaussian():
    N = 256
    dt = 0.6 * predicted_critical_dt(N, 0.3)
    x = sample_energy_variation(N, dt, 0.3, 5000, np.random.default_rng(6))
    z = (x - x.mean()) / x.std()
    assert stats.anderson(z).statistic < 1.0  # 1% critical value is about 1.09


def test_gaussian_acceptance_formula():
    rng = np.random.default_rng(7)
    for m, v in [(0.2, 0.4), (1.0, 2.0), (0.05, 0.1)]:
        x = rng.normal(m, np.sqrt(v), 400000)
        mc = np.mean(np.minimum(1.0, np.exp(-x)))
        assert abs(gaussian_acceptance(m, v) - mc) < 4e-3
    assert gaussian_acceptance(0.0, 0.0) == 1.0


def test_predicted_critical_dt_hits_target():
    for N, nubar in [(64, 0.1), (128, 0.0)]:
        dt = predicted_critical_dt(N, nubar, 0.5)
        assert_allclose(predicted_acceptance(N, dt, nubar), 0.5, atol=1e-9)
        assert dt < critical_timestep(N, nubar)
