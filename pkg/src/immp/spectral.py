"""Closed-form stability and acceptance predictions for the harmonic chain.

For v_int(r) = r^2/2 and no external field, the leapfrog step acts on
each cosine mode k independently.  In the variables

    v_k = p_nu,k / sqrt(1 + nubar^2 delta_k),   x_k = sqrt(delta_k) q_k

the mode energy is (v_k^2 + x_k^2)/2 and one step is the matrix

    L_k = [[1 - h^2/2, -h + h^3/4], [h, 1 - h^2/2]],
    h_k = dt sqrt(delta_k) / sqrt(1 + nubar^2 delta_k).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .chain import delta_k, neumann_spectral_transform


@dataclass
class ModeStability:
    k: int
    h_k: float
    L_k: np.ndarray
    stable: bool


def h_mode(dt, N, nubar, k):
    dk = delta_k(N, k)
    return dt * np.sqrt(dk) / np.sqrt(1.0 + nubar**2 * dk)


def leapfrog_matrix(h):
    """Per-mode propagator acting on (v, x)."""
    a = 1.0 - 0.5 * h * h
    return np.array([[a, -h + 0.25 * h**3], [h, a]])


def mode_stability(dt, N, nubar, k) -> ModeStability:
    h = float(h_mode(dt, N, nubar, k))
    L = leapfrog_matrix(h)
    return ModeStability(k, h, L, bool(abs(np.trace(L)) <= 2.0))


def critical_timestep(N, nubar):
    """Largest dt for which every mode k = 1..N-1 satisfies h_k <= 2."""
    if N < 2:
        raise ValueError("N must be at least 2")
    s = np.sin((N - 1) * np.pi / (2.0 * N))
    return float(np.sqrt(4.0 * nubar**2 + 1.0 / (N**2 * s**2)))


def energy_variation_moments(N, dt, nubar):
    """Exact mean and variance of beta_N dH after one step from equilibrium."""
    h = h_mode(dt, N, nubar, np.arange(1, N))
    h6 = h**6
    return float(np.sum(h6) / 32.0), float(np.sum(h6 / 16.0 + h6 * h6 / 512.0))


def asymptotic_moments(N, dt, nubar):
    """Large-N forms: N dt^6/(32 nubar^6), N dt^6/(16 nubar^6) for nubar > 0,
    (5/8) N^7 dt^6 and (5/4) N^7 dt^6 for nubar = 0."""
    if nubar > 0:
        m = N * dt**6 / (32.0 * nubar**6)
        return m, 2.0 * m
    m = 5.0 / 8.0 * N**7 * dt**6
    return m, 2.0 * m


def critical_dt_scaling_exponent(branch):
    """Exponent alpha in dt_crit ~ N^-alpha at fixed acceptance.

    ``branch`` is "penalized" (nubar > 0: N dt^6 fixed) or "verlet"
    (nubar = 0: N^7 dt^6 fixed); a number is read as nubar.
    """
    if not isinstance(branch, str):
        branch = "penalized" if branch > 0 else "verlet"
    if branch == "penalized":
        return 1.0 / 6.0
    if branch == "verlet":
        return 7.0 / 6.0
    raise ValueError(f"unknown branch {branch!r}")


def spectral_variables(q, p_nu, nubar):
    """(v_k, x_k) for k = 0..N-1 from positions and penalized momenta."""
    N = np.shape(q)[-1]
    dk = delta_k(N, np.arange(N))
    qh = neumann_spectral_transform(q)
    ph = neumann_spectral_transform(p_nu)
    return ph / np.sqrt(1.0 + nubar**2 * dk), np.sqrt(dk) * qh


def propagate_modes(v, x, dt, N, nubar, steps=1):
    """Apply L_k^steps to the spectral variables (modes k >= 1; mode 0 is left
    to the caller because it drifts freely)."""
    h = h_mode(dt, N, nubar, np.arange(N))
    a = 1.0 - 0.5 * h * h
    b = -h + 0.25 * h**3
    v, x = np.array(v, dtype=float), np.array(x, dtype=float)
    for _ in range(steps):
        v, x = a * v + b * x, h * v + a * x
    return v, x


def sample_energy_variation(N, dt, nubar, n_samples, rng):
    """Draws of beta_N dH for one step started from the canonical Gaussian."""
    h = h_mode(dt, N, nubar, np.arange(1, N))
    a = 1.0 - 0.5 * h * h
    b = -h + 0.25 * h**3
    v = rng.standard_normal((n_samples, N - 1))
    x = rng.standard_normal((n_samples, N - 1))
    v1, x1 = a * v + b * x, h * v + a * x
    return 0.5 * np.sum(v1**2 + x1**2 - v**2 - x**2, axis=-1)


def gaussian_acceptance(m, var):
    """E[min(1, exp(-X))] for X ~ N(m, var)."""
    if var <= 0:
        return float(min(1.0, np.exp(-m)))
    s = np.sqrt(var)
    with np.errstate(over="ignore"):
        tail = np.exp(-m + 0.5 * var + stats.norm.logcdf((m - var) / s))
    return float(stats.norm.cdf(-m / s) + tail)


def predicted_acceptance(N, dt, nubar):
    """Mean Metropolis acceptance from the Gaussian approximation of beta_N dH."""
    return gaussian_acceptance(*energy_variation_moments(N, dt, nubar))


def predicted_critical_dt(N, nubar, target=0.5):
    """Step at which predicted_acceptance equals ``target`` (below the CFL bound)."""
    hi = critical_timestep(N, nubar) * 0.999
    f = lambda dt: predicted_acceptance(N, dt, nubar) - target
    if f(hi) > 0:
        return hi
    return optimize.brentq(f, 1e-12, hi, xtol=1e-14, rtol=1e-12)
