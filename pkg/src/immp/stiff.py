"""Stiff slow/fast systems V(q) = U(q, xi(q)/eps) and their eps -> 0 limit.

With the penalty nu = nubar/eps the constraint xi(q) = z/nu turns the
stiff argument into xi(q)/eps = z/nubar, so the extended system can be
written with the eps-independent interaction W(q, z) = U(q, z/nubar).
Letting eps -> 0 (nu -> inf) leaves the rigid constraint xi(q) = 0 with
the same interaction: that is the effective constrained sampler.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import optimize

from .errors import QuadratureDivergent, Unstable
from .integrators import IntegratorConfig, constrained_state, langevin_immp_step, verlet_baseline_step
from .model import Coupling, PenaltyConfig, PhaseState, SystemModel, ThermostatConfig
from .systems import CosineProfile, angle, angle_gradient, circle_hess_contract, circle_jac, circle_xi


@dataclass(frozen=True, eq=False)
class StiffModel:
    """Slow/fast split with U(q, y) confining in y; y stands for xi(q)/eps."""

    xi: Callable
    jac_xi: Callable
    hess_xi_contract: Callable
    U: Callable
    grad1_U: Callable
    grad2_U: Callable
    dim: int
    epsilon: float
    nubar: float
    mass: object = 1.0
    mass_z: object = 1.0
    name: str = "stiff"

    @property
    def nu(self):
        return self.nubar / self.epsilon

    def penalty(self) -> PenaltyConfig:
        return PenaltyConfig.stiffness_scaled(self.nubar, self.epsilon)

    def with_epsilon(self, eps) -> "StiffModel":
        import dataclasses

        return dataclasses.replace(self, epsilon=float(eps))

    def original_system(self) -> SystemModel:
        """Unpenalized system with V(q) = U(q, xi(q)/eps) (for the Verlet baseline)."""
        eps = self.epsilon

        def V(q):
            return self.U(q, self.xi(q)[..., 0] / eps)

        def dV(q):
            y = self.xi(q)[..., 0] / eps
            J = self.jac_xi(q)[..., 0]
            return self.grad1_U(q, y) + (self.grad2_U(q, y) / eps)[..., None] * J

        return SystemModel(
            dim=self.dim,
            n_constraints=1,
            potential=V,
            grad_potential=dV,
            xi=self.xi,
            jac_xi=self.jac_xi,
            hess_xi_contract=self.hess_xi_contract,
            mass=self.mass,
            mass_z=self.mass_z,
            name=self.name + "-original",
        )

    def _coupling(self):
        s = 1.0 / self.nubar
        return Coupling(
            energy=lambda q, z: self.U(q, s * z[..., 0]),
            grad_q=lambda q, z: self.grad1_U(q, s * z[..., 0]),
            grad_z=lambda q, z: (s * self.grad2_U(q, s * z[..., 0]))[..., None],
        )

    def immp_system(self) -> SystemModel:
        """Extended system: no potential in q, interaction W(q, z) = U(q, z/nubar)."""
        zero = lambda q: np.zeros(np.shape(q)[:-1])
        return SystemModel(
            dim=self.dim,
            n_constraints=1,
            potential=zero,
            grad_potential=lambda q: np.zeros_like(q),
            xi=self.xi,
            jac_xi=self.jac_xi,
            hess_xi_contract=self.hess_xi_contract,
            mass=self.mass,
            mass_z=self.mass_z,
            coupling=self._coupling(),
            name=self.name + "-immp",
        )

    def effective_system(self) -> SystemModel:
        """Same extended system; use it with PenaltyConfig.infinite()."""
        return self.immp_system()


def circle_stiff_model(epsilon, nubar=1.0, profile=None, mass=(1.0, 4.0)) -> StiffModel:
    """U(q, y) = v(angle(q)) + y^2/2 around the unit circle."""
    prof = CosineProfile() if profile is None else profile
    return StiffModel(
        xi=circle_xi,
        jac_xi=circle_jac,
        hess_xi_contract=circle_hess_contract,
        U=lambda q, y: prof(angle(q)) + 0.5 * y * y,
        grad1_U=lambda q, y: prof.prime(angle(q))[..., None] * angle_gradient(q),
        grad2_U=lambda q, y: np.asarray(y, dtype=float),
        dim=2,
        epsilon=float(epsilon),
        nubar=float(nubar),
        mass=np.asarray(mass, dtype=float),
        name="circle-stiff",
    )


# ---------------------------------------------------------------------------
# effective potential by quadrature

_GL_NODES, _GL_WEIGHTS = leggauss(20)


def _gl(f, a, b):
    x = 0.5 * (b - a) * _GL_NODES + 0.5 * (a + b)
    return 0.5 * (b - a) * np.dot(_GL_WEIGHTS, f(x))


def _adaptive_gl(f, a, b, tol, depth=0, whole=None):
    if whole is None:
        whole = _gl(f, a, b)
    m = 0.5 * (a + b)
    left, right = _gl(f, a, m), _gl(f, m, b)
    if abs(left + right - whole) <= tol or depth >= 40:
        return left + right
    return _adaptive_gl(f, a, m, 0.5 * tol, depth + 1, left) + _adaptive_gl(f, m, b, 0.5 * tol, depth + 1, right)


def _window(u, beta, tail=1e-10, w0=1.0, w_max=1e6):
    """Centre z* = argmin u and a half-width w where the Boltzmann factor
    has decayed far enough that the neglected tail mass is below ``tail``."""
    with np.errstate(all="ignore"):
        res = optimize.minimize_scalar(lambda z: float(u(np.array([z]))[0]))
        z0 = float(res.x)
        u0 = float(u(np.array([z0]))[0])
    if not (res.success and np.isfinite(z0) and np.isfinite(u0)):
        raise QuadratureDivergent("no minimum of the potential in the fast variable")
    w = w0
    cutoff = -math.log(tail * 1e-3)
    while w <= w_max:
        ends = u(np.array([z0 - w, z0 + w])) - u0
        # the integrand must be negligible at the ends and still decaying
        outer = u(np.array([z0 - 2 * w, z0 + 2 * w])) - u0
        if np.all(beta * ends > cutoff) and np.all(outer >= ends):
            return z0, w, u0
        w *= 2.0
    raise QuadratureDivergent("potential is not confining in the fast variable")


def effective_potential(U, q, beta, rtol=1e-10):
    """U_eff(q) = -1/beta ln int exp(-beta U(q, z)) dz for a single q."""
    q = np.asarray(q, dtype=float)
    u = lambda z: np.asarray(U(np.broadcast_to(q, np.shape(z) + q.shape), z), dtype=float)
    z0, w, u0 = _window(u, beta)
    f = lambda z: np.exp(-beta * (u(z) - u0))
    whole = _gl(f, z0 - w, z0 + w)
    I = _adaptive_gl(f, z0 - w, z0 + w, rtol * abs(whole), whole=whole)
    if not (np.isfinite(I) and I > 0):
        raise QuadratureDivergent("non-finite effective-potential integral")
    return u0 - math.log(I) / beta


def effective_potential_gradient(U, grad1_U, q, beta, rtol=1e-10):
    """grad U_eff(q) = E[grad_q U(q, z)] under exp(-beta U(q, z)) dz."""
    q = np.asarray(q, dtype=float)
    u = lambda z: np.asarray(U(np.broadcast_to(q, np.shape(z) + q.shape), z), dtype=float)
    z0, w, u0 = _window(u, beta)
    f = lambda z: np.exp(-beta * (u(z) - u0))
    Z = _adaptive_gl(f, z0 - w, z0 + w, rtol * _gl(f, z0 - w, z0 + w))
    out = np.empty(q.shape)
    for i in range(q.size):
        g = lambda z, i=i: f(z) * grad1_U(np.broadcast_to(q, np.shape(z) + q.shape), z)[..., i]
        scale = _adaptive_gl(lambda z: np.abs(g(z)), z0 - w, z0 + w, 1e-3 * Z) + 1e-300
        out[i] = _adaptive_gl(g, z0 - w, z0 + w, rtol * scale) / Z
    return out


def averaged_system(stiff: StiffModel, beta) -> SystemModel:
    """Rigid system on xi(q) = 0 with potential U_eff(q) (fast variable averaged out).

    Potential and forces are evaluated by quadrature point by point, so
    this is meant for small batches.  Use it with PenaltyConfig.infinite().
    """

    def each(f, q, shape):
        q = np.asarray(q, dtype=float)
        flat = q.reshape(-1, stiff.dim)
        out = np.array([f(x) for x in flat])
        return out.reshape(q.shape[:-1] + shape)

    V = lambda q: each(lambda x: effective_potential(stiff.U, x, beta), q, ())
    dV = lambda q: each(lambda x: effective_potential_gradient(stiff.U, stiff.grad1_U, x, beta), q, (stiff.dim,))
    return SystemModel(
        dim=stiff.dim,
        n_constraints=1,
        potential=V,
        grad_potential=dV,
        xi=stiff.xi,
        jac_xi=stiff.jac_xi,
        hess_xi_contract=stiff.hess_xi_contract,
        mass=stiff.mass,
        mass_z=stiff.mass_z,
        name=stiff.name + "-averaged",
    )


# ---------------------------------------------------------------------------
# samplers


def effective_constrained_step(model: SystemModel, thermo: ThermostatConfig, cfg: IntegratorConfig, s: PhaseState, rng):
    """One step of the rigidly constrained effective dynamics (nu = inf).

    Leapfrog on xi(q) = 0 with forces -grad_q W - grad V_fix and free
    (z, p_z) driven by -grad_z W, then the OU part (Metropolis if
    ``cfg.metropolis``).
    """
    return langevin_immp_step(model, PenaltyConfig.infinite(), thermo, cfg, s, rng)


@dataclass
class SweepRow:
    epsilon: float
    nu: float
    observable_mean: float
    observable_se: float
    acceptance: float
    ks_statistic: float
    ks_pvalue: float
    verlet_unstable: bool


def sample_profile_angles(profile, beta, n, rng):
    """Exact draws from exp(-beta v(theta)) on (-pi, pi] by rejection."""
    grid = np.linspace(-np.pi, np.pi, 4001)
    vmin = float(np.min(profile(grid))) - 1e-9
    out = np.empty(0)
    while out.size < n:
        th = rng.uniform(-np.pi, np.pi, 2 * n)
        keep = rng.random(2 * n) < np.exp(-beta * (profile(th) - vmin))
        out = np.concatenate([out, th[keep]])
    return out[:n]


def stiff_start(stiff: StiffModel, sys_model, pen, thermo, n, rng, profile=None):
    """Equilibrium start on the circle model: angle from the slow marginal,
    z from its Gaussian marginal, q moved radially onto xi(q) = z/nu."""
    prof = CosineProfile() if profile is None else profile
    theta = sample_profile_angles(prof, thermo.beta, n, rng)
    q = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    z = rng.standard_normal((n, 1)) * stiff.nubar / math.sqrt(thermo.beta)
    if not pen.is_infinite:
        q = q * np.sqrt(1.0 + z[:, 0] / pen.nu)[:, None]
    return constrained_state(sys_model, pen, thermo, q, rng, z=z)


def run_chains(sys_model, pen, thermo, cfg, s, rng, n_steps, observable=None):
    """Advance a batch of chains; returns (final state, time-averaged
    observable per chain, mean acceptance probability)."""
    acc = []
    total = 0.0
    for _ in range(n_steps):
        s, rep = langevin_immp_step(sys_model, pen, thermo, cfg, s, rng)
        if rep.accept_prob is not None:
            acc.append(float(np.mean(rep.accept_prob)))
        if observable is not None:
            total = total + observable(s.q)
    return s, total / n_steps, (float(np.mean(acc)) if acc else 1.0)


def verlet_is_unstable(model: SystemModel, thermo, dt, s, rng, n_steps=200, blowup=1e3):
    """Run Verlet; True if the trajectory overflows or its energy grows by ``blowup``."""
    cfg = IntegratorConfig(dt=dt)
    E0 = np.mean(0.5 * np.sum(s.p * model.mass.solve(s.p), axis=-1) + model.potential(s.q))
    try:
        with np.errstate(all="ignore"):
            for _ in range(n_steps):
                s, _ = verlet_baseline_step(model, thermo, cfg, s, rng)
                E = np.mean(0.5 * np.sum(s.p * model.mass.solve(s.p), axis=-1) + model.potential(s.q))
                if not np.isfinite(E) or abs(E) > blowup * max(abs(E0), 1.0):
                    return True
    except Unstable:
        return True
    return False


def epsilon_sweep(
    stiff: StiffModel,
    eps_list: Sequence[float],
    dt: float,
    thermo: ThermostatConfig,
    observable: Callable = None,
    n_replicas: int = 2000,
    n_steps: int = 400,
    seed: int = 0,
    metropolis: bool = True,
):
    """Fixed-dt sweep over eps with nu = nubar/eps on the circle stiff model.

    Each of ``n_replicas`` independent chains starts from the slow
    equilibrium and runs ``n_steps`` Metropolized Langevin steps.  A row
    holds the time-averaged observable, the mean acceptance probability,
    the two-sample KS test of the final angles against the effective
    (nu = inf) sampler run the same way, and whether plain Verlet on
    V = U(q, xi/eps) blew up at the same dt.
    """
    from scipy import stats as sst

    from .rng import rng_stream

    if observable is None:
        observable = lambda q: np.cos(angle(q))
    cfg = IntegratorConfig(dt=dt, metropolis=metropolis, newton_tol=1e-11)

    eff_model = stiff.effective_system()
    pen_inf = PenaltyConfig.infinite()
    rng = rng_stream(seed, 0, "sweep/effective")
    s = stiff_start(stiff, eff_model, pen_inf, thermo, n_replicas, rng)
    s, _, _ = run_chains(eff_model, pen_inf, thermo, cfg, s, rng, n_steps)
    eff_angles = angle(s.q)

    rows = []
    for j, eps in enumerate(eps_list):
        st = stiff.with_epsilon(eps)
        sys_model = st.immp_system()
        pen = st.penalty()
        rng = rng_stream(seed, 0, f"sweep/{j}")
        s = stiff_start(st, sys_model, pen, thermo, n_replicas, rng)
        s, obs, acc = run_chains(sys_model, pen, thermo, cfg, s, rng, n_steps, observable)
        ks = sst.ks_2samp(angle(s.q), eff_angles)
        orig = st.original_system()
        rng_v = rng_stream(seed, 0, f"sweep/verlet/{j}")
        theta = rng_v.uniform(-np.pi, np.pi, n_replicas)
        q0 = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        p0 = rng_v.standard_normal((n_replicas, 2)) * np.sqrt(orig.mass.diagonal / thermo.beta)
        zeros = np.zeros((n_replicas, 1))
        unstable = verlet_is_unstable(orig, thermo, dt, PhaseState(q0, p0, zeros, zeros.copy()), rng_v)
        rows.append(
            SweepRow(
                float(eps), st.nu, float(np.mean(obs)),
                float(np.std(obs, ddof=1) / math.sqrt(obs.size)),
                acc, float(ks.statistic), float(ks.pvalue), unstable,
            )
        )
    return rows, eff_angles
