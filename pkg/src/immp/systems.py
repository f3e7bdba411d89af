"""Small registered test systems: a one-dimensional double well and a
particle constrained near the unit circle."""
from __future__ import annotations

import numpy as np

from .model import SystemModel


def double_well(height=1.0, mass=1.0, mass_z=1.0) -> SystemModel:
    """V(q) = height (q^2 - 1)^2 in one dimension, fast variable xi(q) = q."""

    def V(q):
        return height * (q[..., 0] ** 2 - 1.0) ** 2

    def dV(q):
        return 4.0 * height * q * (q * q - 1.0)

    return SystemModel(
        dim=1,
        n_constraints=1,
        potential=V,
        grad_potential=dV,
        xi=lambda q: q.copy(),
        constant_jacobian=np.ones((1, 1)),
        mass=mass,
        mass_z=mass_z,
        name="double_well",
    )


def double_well_density(x, beta, height=1.0):
    """Unnormalized Boltzmann density of the double well."""
    return np.exp(-beta * height * (x * x - 1.0) ** 2)


class CosineProfile:
    """v(theta) = a1 cos(theta) + a2 cos(2 theta) and its derivative."""

    def __init__(self, a1=1.0, a2=0.5):
        self.a1, self.a2 = a1, a2

    def __call__(self, theta):
        return self.a1 * np.cos(theta) + self.a2 * np.cos(2 * theta)

    def prime(self, theta):
        return -self.a1 * np.sin(theta) - 2 * self.a2 * np.sin(2 * theta)


def angle(q):
    return np.arctan2(q[..., 1], q[..., 0])


def angle_gradient(q):
    """Gradient of atan2(q2, q1): (-q2, q1)/|q|^2."""
    r2 = q[..., 0] ** 2 + q[..., 1] ** 2
    return np.stack([-q[..., 1], q[..., 0]], axis=-1) / r2[..., None]


def circle_xi(q):
    return (q[..., 0] ** 2 + q[..., 1] ** 2 - 1.0)[..., None]


def circle_jac(q):
    return 2.0 * q[..., :, None]


def circle_hess_contract(q, W):
    # Hess(xi) = 2 Id for every q
    return 2.0 * W[..., :, 0]


def circle_model(profile=None, radial_stiffness=0.0, mass=(1.0, 4.0), mass_z=1.0) -> SystemModel:
    """Particle in the plane with fast variable xi(q) = |q|^2 - 1.

    V(q) = v(angle(q)) + (k/2) xi(q)^2.  The default anisotropic mass makes
    the Gram matrix 4 q^T M^-1 q vary along the circle, so Fixman terms
    are not trivial.
    """
    prof = CosineProfile() if profile is None else profile
    k = radial_stiffness

    def V(q):
        return prof(angle(q)) + 0.5 * k * circle_xi(q)[..., 0] ** 2

    def dV(q):
        g = prof.prime(angle(q))[..., None] * angle_gradient(q)
        if k:
            g = g + k * circle_xi(q) * 2.0 * q
        return g

    return SystemModel(
        dim=2,
        n_constraints=1,
        potential=V,
        grad_potential=dV,
        xi=circle_xi,
        jac_xi=circle_jac,
        hess_xi_contract=circle_hess_contract,
        mass=np.asarray(mass, dtype=float),
        mass_z=mass_z,
        name="circle",
    )


def quadric_model(A, B, mass, mass_z=1.0, potential_scale=0.3) -> SystemModel:
    """xi_a(q) = A_a . q + 1/2 q^T B_a q with symmetric B_a (used for random tests)."""
    A = np.asarray(A, dtype=float)  # (n, d)
    B = np.asarray(B, dtype=float)  # (n, d, d)
    n, d = A.shape

    def xi(q):
        return q @ A.T + 0.5 * np.einsum("...i,aij,...j->...a", q, B, q)

    def jac(q):
        return A.T + np.einsum("aij,...j->...ia", B, q)

    def hess_contract(q, W):
        return np.einsum("aij,...ja->...i", B, W)

    def V(q):
        return potential_scale * np.sum(q**2, axis=-1) + np.sin(q[..., 0])

    def dV(q):
        g = 2 * potential_scale * q
        g[..., 0] += np.cos(q[..., 0])
        return g

    return SystemModel(
        dim=d,
        n_constraints=n,
        potential=V,
        grad_potential=dV,
        xi=xi,
        jac_xi=jac,
        hess_xi_contract=hess_contract,
        mass=mass,
        mass_z=mass_z,
        name="quadric",
    )


def random_quadric_model(rng, d=4, n=2, curvature=0.3):
    A = rng.standard_normal((n, d))
    B = curvature * rng.standard_normal((n, d, d))
    B = 0.5 * (B + np.swapaxes(B, 1, 2))
    L = rng.standard_normal((d, d))
    M = L @ L.T + d * np.eye(d)
    Lz = rng.standard_normal((n, n))
    Mz = Lz @ Lz.T + n * np.eye(n)
    return quadric_model(A, B, M, Mz)
