"""Problem definition, phase states and the penalized-mass Hamiltonians.

Shapes: a single configuration is a vector ``q`` of length ``d``; every
routine also accepts a batch ``q`` of shape ``(B, d)`` (one row per
replica).  Jacobians of the constraint map are ``(..., d, n)`` with
columns ``grad xi_i``.  A model with a constant Jacobian (linear
constraints) may pass it as a dense or scipy.sparse ``(d, n)`` matrix.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import SolverFailure
from .linalg import SymOp, as_operator


@dataclass(frozen=True)
class Coupling:
    """Optional position/auxiliary interaction W(q, z) added to H_IMMP.

    Used by the stiff-limit module, where the fast variable enters the
    energy through z instead of xi(q).
    """

    energy: Callable
    grad_q: Callable
    grad_z: Callable


@dataclass(frozen=True, eq=False)
class SystemModel:
    dim: int
    n_constraints: int
    potential: Callable
    grad_potential: Callable
    xi: Callable
    jac_xi: Optional[Callable] = None
    constant_jacobian: object = None
    hess_xi_contract: Optional[Callable] = None
    mass: object = 1.0
    mass_z: object = 1.0
    coupling: Optional[Coupling] = None
    structured_solve: Optional[Callable] = None
    fd_fallback: bool = False
    name: str = "model"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        d, n = self.dim, self.n_constraints
        if d < 1 or not (0 <= n <= d):
            raise ValueError(f"need d >= 1 and 0 <= n <= d, got d={d}, n={n}")
        object.__setattr__(self, "mass", as_operator(self.mass, d))
        object.__setattr__(self, "mass_z", as_operator(self.mass_z, n))
        J = self.constant_jacobian
        if J is not None:
            if not sp.issparse(J):
                J = np.asarray(J, dtype=float)
            else:
                J = sp.csr_matrix(J)
            if J.shape != (d, n):
                raise ValueError(f"constant Jacobian has shape {J.shape}, expected {(d, n)}")
            object.__setattr__(self, "constant_jacobian", J)
        elif self.jac_xi is None and n > 0:
            raise ValueError("either jac_xi or constant_jacobian must be given")

    @property
    def is_linear(self) -> bool:
        return self.constant_jacobian is not None or self.n_constraints == 0

    @property
    def sparse_jacobian(self) -> bool:
        return sp.issparse(self.constant_jacobian)

    def jacobian(self, q):
        """Constraint Jacobian at q, shape (..., d, n) (or the constant (d, n))."""
        if self.n_constraints == 0:
            return np.zeros(np.shape(q)[:-1] + (self.dim, 0))
        if self.constant_jacobian is not None:
            return self.constant_jacobian
        return self.jac_xi(q)

    def replace(self, **kw) -> "SystemModel":
        kw.setdefault("_cache", {})
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# Jacobian helpers that work for dense batched, dense constant and sparse J


def jac_vec(J, lam):
    """grad_xi @ lam: (..., n) -> (..., d)."""
    if sp.issparse(J):
        flat = lam.reshape(-1, lam.shape[-1])
        return np.asarray(J @ flat.T).T.reshape(lam.shape[:-1] + (J.shape[0],))
    return np.einsum("...dn,...n->...d", J, lam)


def jac_t_vec(J, v):
    """grad_xi^T @ v: (..., d) -> (..., n)."""
    if sp.issparse(J):
        flat = v.reshape(-1, v.shape[-1])
        return np.asarray(flat @ J).reshape(v.shape[:-1] + (J.shape[1],))
    return np.einsum("...dn,...d->...n", J, v)


def mass_solve_columns(M: SymOp, J):
    """M^{-1} grad_xi, same layout as J."""
    if sp.issparse(J):
        diag = M.diagonal
        if diag is None:
            raise ValueError("sparse Jacobians require a diagonal mass matrix")
        return sp.diags(1.0 / diag) @ J
    return np.swapaxes(M.solve(np.swapaxes(J, -1, -2)), -1, -2)


def jt_a_j(J, AJ):
    """grad_xi^T (A grad_xi) for a precomputed A grad_xi."""
    if sp.issparse(J):
        return (J.T @ AJ).tocsc()
    return np.einsum("...dn,...dm->...nm", J, AJ)


# ---------------------------------------------------------------------------


@dataclass
class PhaseState:
    """Extended phase point (q, p, z, p_z); arrays may carry a batch axis."""

    q: np.ndarray
    p: np.ndarray
    z: np.ndarray
    pz: np.ndarray

    @classmethod
    def create(cls, q, p=None, z=None, pz=None, n=0):
        q = np.array(q, dtype=float)
        batch = q.shape[:-1]
        p = np.zeros_like(q) if p is None else np.array(p, dtype=float)
        z = np.zeros(batch + (n,)) if z is None else np.array(z, dtype=float)
        pz = np.zeros(batch + (n,)) if pz is None else np.array(pz, dtype=float)
        return cls(q, p, z, pz)

    def copy(self) -> "PhaseState":
        return PhaseState(self.q.copy(), self.p.copy(), self.z.copy(), self.pz.copy())

    @property
    def batch_shape(self):
        return self.q.shape[:-1]

    def flipped(self) -> "PhaseState":
        return PhaseState(self.q.copy(), -self.p, self.z.copy(), -self.pz)

    def where(self, mask, other: "PhaseState") -> "PhaseState":
        """Take self where mask (batch-shaped) is true, else other."""
        m = np.asarray(mask)[..., None]
        return PhaseState(
            np.where(m, self.q, other.q),
            np.where(m, self.p, other.p),
            np.where(m, self.z, other.z),
            np.where(m, self.pz, other.pz),
        )


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty intensity nu and the rule that produced it.

    ``nu = inf`` selects the rigidly constrained limit; ``nu = 0`` is only
    meaningful for the unconstrained baseline.
    """

    nu: float
    rule: str = "fixed"
    nubar: Optional[float] = None
    k: Optional[float] = None

    def __post_init__(self):
        if not (self.nu >= 0):
            raise ValueError(f"penalty must be nonnegative, got {self.nu}")
        if self.rule not in ("fixed", "timestep_scaled", "stiffness_scaled"):
            raise ValueError(f"unknown penalty rule {self.rule!r}")

    @classmethod
    def fixed(cls, nu):
        return cls(float(nu), "fixed")

    @classmethod
    def timestep_scaled(cls, nubar, k, dt):
        return cls(float(nubar) * float(dt) ** float(k), "timestep_scaled", nubar, k)

    @classmethod
    def stiffness_scaled(cls, nubar, eps):
        return cls(float(nubar) / float(eps), "stiffness_scaled", nubar)

    @classmethod
    def infinite(cls):
        return cls(math.inf, "fixed")

    @property
    def inv_nu(self) -> float:
        if math.isinf(self.nu):
            return 0.0
        if self.nu == 0:
            return math.inf
        return 1.0 / self.nu

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.nu)


class ThermostatConfig:
    """Inverse temperature and friction; noise amplitudes are derived.

    sigma is always built as a square root of (2/beta) gamma, so the
    fluctuation-dissipation identity holds by construction.
    """

    def __init__(self, beta, gamma=0.0, gamma_z=0.0, dim=None, n=None):
        if not beta > 0:
            raise ValueError("beta must be positive")
        self.beta = float(beta)
        self._gamma_in = gamma
        self._gamma_z_in = gamma_z
        self.gamma = None if dim is None else as_operator(gamma, dim)
        self.gamma_z = None if n is None else as_operator(gamma_z, n)
        self._bound = {}

    def bind(self, model: SystemModel) -> "ThermostatConfig":
        """Resolve scalar/diagonal friction to the model dimensions (memoized)."""
        if (
            self.gamma is not None
            and self.gamma.dim == model.dim
            and self.gamma_z is not None
            and self.gamma_z.dim == model.n_constraints
        ):
            return self
        key = (model.dim, model.n_constraints)
        bound = self._bound.get(key)
        if bound is None:
            bound = ThermostatConfig(
                self.beta, self._gamma_in, self._gamma_z_in, model.dim, model.n_constraints
            )
            self._bound[key] = bound
        return bound

    def sigma_apply(self, u):
        """sigma @ u for u of length d."""
        return _scaled_sqrt(self.gamma, 2.0 / self.beta, u)

    def sigma_z_apply(self, u):
        return _scaled_sqrt(self.gamma_z, 2.0 / self.beta, u)

    @property
    def frictionless(self) -> bool:
        return self.gamma.is_zero and (self.gamma_z.dim == 0 or self.gamma_z.is_zero)

    def __repr__(self):
        return f"ThermostatConfig(beta={self.beta}, gamma={self._gamma_in!r}, gamma_z={self._gamma_z_in!r})"


def _scaled_sqrt(op: SymOp, c, u):
    if op.diagonal is not None:
        return u * np.sqrt(c * op.diagonal)
    # positive semidefinite square root via eigh (Cholesky would fail on PSD)
    w, V = np.linalg.eigh(op.matrix())
    R = V * np.sqrt(np.clip(c * w, 0.0, None))
    return u @ R.T


# ---------------------------------------------------------------------------
# penalized mass


def penalized_mass_apply(model: SystemModel, pen: PenaltyConfig, q, v):
    """(M + nu^2 grad_xi M_z grad_xi^T) v."""
    v = np.asarray(v, dtype=float)
    out = model.mass.apply(v)
    if model.n_constraints == 0 or pen.nu == 0:
        return out
    if pen.is_infinite:
        raise ValueError("the penalized mass is unbounded for nu = inf")
    J = model.jacobian(q)
    return out + pen.nu**2 * jac_vec(J, model.mass_z.apply(jac_t_vec(J, v)))


def penalized_mass_matrix(model: SystemModel, pen: PenaltyConfig, q):
    """Dense M_nu (batched if q is)."""
    M = model.mass.matrix()
    if model.n_constraints == 0 or pen.nu == 0:
        return np.broadcast_to(M, np.shape(q)[:-1] + M.shape).copy()
    J = model.jacobian(q)
    if sp.issparse(J):
        J = J.toarray()
    Mz = model.mass_z.matrix()
    return M + pen.nu**2 * np.einsum("...in,nm,...jm->...ij", J, Mz, J)


def penalized_mass_solve(model: SystemModel, pen: PenaltyConfig, q, w, rtol=1e-12):
    """Apply M_nu^{-1}.

    Small dense problems use a direct factorization; chain-structured
    models (which provide ``structured_solve``) use an O(N) banded solve.
    The residual is checked as a normwise backward error
    ||M_nu x - w|| / (||M_nu|| ||x|| + ||w||), which is the quantity a
    stable direct solve controls independently of conditioning.
    """
    w = np.asarray(w, dtype=float)
    if model.n_constraints == 0 or pen.nu == 0:
        return model.mass.solve(w)
    if pen.is_infinite:
        raise ValueError("the penalized mass is unbounded for nu = inf")
    m, mz = _scalar(model.mass), _scalar(model.mass_z)
    if model.structured_solve is not None and m is not None and mz is not None:
        x = model.structured_solve(m, pen.nu**2 * mz, w)
        norm_A = m + 4.0 * pen.nu**2 * mz
    else:
        A = penalized_mass_matrix(model, pen, q)
        x = np.linalg.solve(A, w[..., None])[..., 0]
        r = w - np.einsum("...ij,...j->...i", A, x)
        x = x + np.linalg.solve(A, r[..., None])[..., 0]
        norm_A = np.max(np.abs(A).sum(axis=-1))
    r = penalized_mass_apply(model, pen, q, x) - w
    err = np.max(np.abs(r)) / (norm_A * np.max(np.abs(x)) + np.max(np.abs(w)) + 1e-300)
    if not err <= rtol:
        raise SolverFailure(f"penalized mass solve residual {err:.3g} exceeds {rtol:g}")
    return x


def _scalar(op: SymOp):
    return getattr(op, "scalar", None) if op.dim else 1.0


# ---------------------------------------------------------------------------
# Hamiltonians


def kinetic_energy(model: SystemModel, p, pz=None):
    ke = 0.5 * np.sum(p * model.mass.solve(p), axis=-1)
    if pz is not None and model.n_constraints:
        ke = ke + 0.5 * np.sum(pz * model.mass_z.solve(pz), axis=-1)
    return ke


def immp_hamiltonian(model: SystemModel, pen: PenaltyConfig, thermo: ThermostatConfig, s: PhaseState):
    """Extended energy 1/2 p M^-1 p + 1/2 pz Mz^-1 pz + V + V_fix,nu (+ W)."""
    from .geometry import fixman_potential

    H = kinetic_energy(model, s.p, s.pz) + model.potential(s.q)
    if model.n_constraints:
        H = H + fixman_potential(model, pen, thermo, s.q)
    if model.coupling is not None:
        H = H + model.coupling.energy(s.q, s.z)
    return H


def penalized_hamiltonian(model: SystemModel, pen: PenaltyConfig, thermo: ThermostatConfig, q, p_nu):
    """1/2 p_nu^T M_nu^-1 p_nu + V(q) + V_fix,nu(q), for p_nu = p + nu grad_xi p_z."""
    from .geometry import fixman_potential

    v = penalized_mass_solve(model, pen, q, p_nu)
    H = 0.5 * np.sum(p_nu * v, axis=-1) + model.potential(q)
    if model.n_constraints and pen.nu > 0:
        H = H + fixman_potential(model, pen, thermo, q)
    return H


def penalized_momentum(model: SystemModel, pen: PenaltyConfig, s: PhaseState):
    """p_nu = p + nu grad_xi(q) p_z."""
    if model.n_constraints == 0 or pen.nu == 0:
        return s.p.copy()
    return s.p + pen.nu * jac_vec(model.jacobian(s.q), s.pz)


def state_from_penalized_momentum(model: SystemModel, pen: PenaltyConfig, q, p_nu):
    """Extended state on both constraints with p + nu grad_xi p_z = p_nu.

    The velocity is v = M_nu^-1 p_nu; then p = M v, p_z = nu M_z grad_xi^T v
    and z = nu xi(q).
    """
    q = np.asarray(q, dtype=float)
    v = penalized_mass_solve(model, pen, q, p_nu)
    p = model.mass.apply(v)
    n = model.n_constraints
    if n == 0 or pen.nu == 0:
        batch = q.shape[:-1]
        return PhaseState(q.copy(), p, np.zeros(batch + (n,)), np.zeros(batch + (n,)))
    pz = pen.nu * model.mass_z.apply(jac_t_vec(model.jacobian(q), v))
    return PhaseState(q.copy(), p, pen.nu * model.xi(q), pz)
