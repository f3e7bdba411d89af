"""One-dimensional particle chain with nearest-neighbour interactions.

Particles q_1..q_N on a line, bonds r_i = N (q_{i+1} - q_i), energy

    H = 1/2 |p|^2 + sum_i v_int(N (q_{i+1} - q_i)) + sum_i v_ext(q_i)

at inverse temperature beta_N = beta / N.  The bonds are the penalized
fast variables: xi_i(q) = q_{i+1} - q_i with nu = nubar N, so that
M_nu = Id - nubar^2 Delta_d with the Neumann discrete Laplacian Delta_d.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.linalg as sla
import scipy.sparse as sp

from .model import PenaltyConfig, SystemModel, ThermostatConfig

R_INT = 0.1
WELL_DEPTH = 50.0
WELL_CENTER = 0.1
WELL_HALF_WIDTH = 0.05
EXT_CENTER = 0.5
EXT_WIDTH = 2.2


def v_int(r, cutoff=R_INT):
    """Double-well repulsion (50((r - 0.1)^2 - 0.05^2))^2 for r <= cutoff, else 0.

    With the default cutoff 0.1 the potential jumps by 0.015625 at r = 0.1;
    ``cutoff=0.15`` is the continuous variant (the well vanishes there).
    """
    r = np.asarray(r, dtype=float)
    u = WELL_DEPTH * ((r - WELL_CENTER) ** 2 - WELL_HALF_WIDTH**2)
    return np.where(r <= cutoff, u * u, 0.0)


def v_int_prime(r, cutoff=R_INT):
    r = np.asarray(r, dtype=float)
    u = WELL_DEPTH * ((r - WELL_CENTER) ** 2 - WELL_HALF_WIDTH**2)
    du = 2.0 * WELL_DEPTH * (r - WELL_CENTER)
    return np.where(r <= cutoff, 2.0 * u * du, 0.0)


def v_ext(q):
    return ((np.asarray(q, dtype=float) - EXT_CENTER) / EXT_WIDTH) ** 2


def v_ext_prime(q):
    return 2.0 * (np.asarray(q, dtype=float) - EXT_CENTER) / EXT_WIDTH**2


def discrete_gradient(q):
    """N (q_{i+1} - q_i), i = 1..N-1 (last axis)."""
    q = np.asarray(q, dtype=float)
    N = q.shape[-1]
    return N * np.diff(q, axis=-1)


def discrete_gradient_transpose(w):
    """Adjoint of discrete_gradient: maps (..., N-1) to (..., N)."""
    w = np.asarray(w, dtype=float)
    N = w.shape[-1] + 1
    out = np.zeros(w.shape[:-1] + (N,))
    out[..., 1:] += w
    out[..., :-1] -= w
    return N * out


def neumann_laplacian(N):
    """Dense Delta_d = -(grad_d)^T grad_d (negative semidefinite)."""
    D = N * (np.eye(N, k=1) - np.eye(N))[:-1]
    return -(D.T @ D)


def delta_k(N, k):
    """Eigenvalues 4 N^2 sin^2(k pi / 2N) of -Delta_d."""
    return 4.0 * N**2 * np.sin(np.asarray(k) * np.pi / (2.0 * N)) ** 2


def neumann_spectral_transform(x):
    """Coefficients in the orthonormal cosine basis diagonalizing -Delta_d.

    P_{0,i} = sqrt(1/N), P_{k,i} = sqrt(2/N) cos(k pi (i - 1/2) / N); this is
    the orthonormal type-II DCT.
    """
    return scipy.fft.dct(np.asarray(x, dtype=float), type=2, norm="ortho", axis=-1)


def inverse_neumann_spectral_transform(xh):
    return scipy.fft.idct(np.asarray(xh, dtype=float), type=2, norm="ortho", axis=-1)


def cosine_basis(N):
    """Explicit matrix P (rows are modes)."""
    i = np.arange(1, N + 1)
    k = np.arange(N)[:, None]
    P = np.sqrt(2.0 / N) * np.cos(k * np.pi * (i - 0.5) / N)
    P[0] = np.sqrt(1.0 / N)
    return P


def _banded_shifted_laplacian(N, alpha, kappa):
    """Banded storage of alpha Id + kappa (-Delta_d / N^2) = alpha Id + kappa J J^T."""
    ab = np.zeros((2, N))
    diag = np.full(N, 2.0)
    diag[0] = diag[-1] = 1.0
    ab[0, 1:] = -kappa
    ab[1] = alpha + kappa * diag
    return ab


def tridiagonal_solve(lower, diag, upper, w):
    """Solve a tridiagonal system along the last axis of w."""
    w = np.asarray(w, dtype=float)
    N = w.shape[-1]
    ab = np.zeros((3, N))
    ab[0, 1:] = upper
    ab[1] = diag
    ab[2, :-1] = lower
    flat = w.reshape(-1, N).T
    return sla.solve_banded((1, 1), ab, flat).T.reshape(w.shape)


def shifted_chain_solve(alpha, kappa, w):
    """Solve (alpha Id + kappa J J^T) x = w, J the (N, N-1) first-difference matrix.

    J J^T = -Delta_d / N^2, so alpha = 1, kappa = nu^2 gives the penalized
    mass Id - nubar^2 Delta_d.  SPD banded Cholesky, O(N) per right-hand side.
    """
    w = np.asarray(w, dtype=float)
    N = w.shape[-1]
    ab = _banded_shifted_laplacian(N, alpha, kappa)
    flat = w.reshape(-1, N).T
    return sla.solveh_banded(ab, flat).T.reshape(w.shape)


def penalized_chain_solve(nubar, w):
    """(Id - nubar^2 Delta_d)^{-1} w."""
    N = np.shape(w)[-1]
    return shifted_chain_solve(1.0, (nubar * N) ** 2, w)


def difference_jacobian(N):
    """Sparse (N, N-1) Jacobian of xi_i = q_{i+1} - q_i."""
    i = np.arange(N - 1)
    rows = np.concatenate([i, i + 1])
    cols = np.concatenate([i, i])
    vals = np.concatenate([-np.ones(N - 1), np.ones(N - 1)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(N, N - 1))


@dataclass(frozen=True)
class ChainModel:
    N: int
    nubar: float = 0.0
    beta: float = 10.0
    gamma: float = 0.1
    gamma_z: float = 0.0
    interaction: str = "double_well"
    external: bool = True
    continuous_cutoff: bool = False

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("chain needs at least two particles")
        if self.interaction not in ("double_well", "harmonic"):
            raise ValueError(f"unknown interaction {self.interaction!r}")
        if self.nubar < 0:
            raise ValueError("nubar must be nonnegative")

    @property
    def nu(self):
        return self.nubar * self.N

    @property
    def beta_N(self):
        return self.beta / self.N

    @property
    def cutoff(self):
        return 0.15 if self.continuous_cutoff else R_INT

    def interaction_energy(self, r):
        if self.interaction == "harmonic":
            return 0.5 * r * r
        return v_int(r, self.cutoff)

    def interaction_force(self, r):
        if self.interaction == "harmonic":
            return r
        return v_int_prime(r, self.cutoff)

    def potential(self, q):
        r = discrete_gradient(q)
        V = np.sum(self.interaction_energy(r), axis=-1)
        if self.external:
            V = V + np.sum(v_ext(q), axis=-1)
        return V

    def grad_potential(self, q):
        g = discrete_gradient_transpose(self.interaction_force(discrete_gradient(q)))
        if self.external:
            g = g + v_ext_prime(q)
        return g

    def penalty(self) -> PenaltyConfig:
        return PenaltyConfig.fixed(self.nu)

    def thermostat(self) -> ThermostatConfig:
        return ThermostatConfig(self.beta_N, self.gamma, self.gamma_z)


def build_chain_system(chain: ChainModel) -> SystemModel:
    """SystemModel with d = N, n = N - 1, unit masses and linear bond constraints."""
    N = chain.N
    return SystemModel(
        dim=N,
        n_constraints=N - 1,
        potential=chain.potential,
        grad_potential=chain.grad_potential,
        xi=lambda q: np.diff(q, axis=-1),
        constant_jacobian=difference_jacobian(N),
        mass=1.0,
        mass_z=1.0,
        structured_solve=shifted_chain_solve,
        name=f"chain-{chain.interaction}-N{N}",
    )


def chain_equilibrium_harmonic(chain: ChainModel, n_samples, rng):
    """Exact canonical positions and penalized momenta of the harmonic chain.

    Uses the spectral decomposition: mode k > 0 has stiffness delta_k and
    mass 1 + nubar^2 delta_k.  Mode 0 is free; its position is pinned so
    that the chain is centred at 0.5 and its momentum is canonical.
    Returns (q, p_nu), each of shape (n_samples, N).
    """
    if chain.interaction != "harmonic" or chain.external:
        raise ValueError("exact sampling is only available for the pure harmonic chain")
    N = chain.N
    k = np.arange(N)
    dk = delta_k(N, k)
    mass = 1.0 + chain.nubar**2 * dk
    c = 1.0 / np.sqrt(chain.beta_N)
    qh = np.zeros((n_samples, N))
    qh[:, 1:] = c * rng.standard_normal((n_samples, N - 1)) / np.sqrt(dk[1:])
    qh[:, 0] = 0.5 * np.sqrt(N)
    ph = c * np.sqrt(mass) * rng.standard_normal((n_samples, N))
    return inverse_neumann_spectral_transform(qh), inverse_neumann_spectral_transform(ph)
