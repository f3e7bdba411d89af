"""Time steppers for the penalized (IMMP) Langevin dynamics.

* ``rattle_step``: the constrained leapfrog on the extended Hamiltonian.
* ``ou_midpoint_step``: implicit midpoint Ornstein-Uhlenbeck update of the
  extended momenta, kept on the hidden constraint by a multiplier.
* ``langevin_immp_step`` / ``hmc_step``: compositions of the two, the
  latter with a Metropolis test on the full extended energy.
* ``verlet_baseline_step``: plain velocity Verlet on the original system.

Every stepper accepts batched states (leading replica axis).  Noise is
always drawn as ``standard_normal(batch + (d + n,))`` per OU substep,
independently of nu, so runs that differ only in the penalty consume
identical random streams.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NewtonDiverged, TargetUnreachable, Unstable
from .geometry import fixman_gradient, gram, momentum_residual, position_residual, project_momentum
from .linalg import Dense, Diagonal, generalized_max_eig, small_solve
from .model import (
    PenaltyConfig,
    PhaseState,
    SystemModel,
    ThermostatConfig,
    immp_hamiltonian,
    jac_t_vec,
    jac_vec,
    jt_a_j,
    kinetic_energy,
    mass_solve_columns,
)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    tol_c: float = 1e-9
    fixman_in_forces: bool = True
    metropolis: bool = False
    ou_substeps: int = 1
    splitting: str = "lie"
    frozen_jacobian: bool = False
    check_constraints: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.newton_tol < self.tol_c:
            raise ValueError("newton_tol must be smaller than tol_c")
        if self.ou_substeps < 1:
            raise ValueError("ou_substeps must be >= 1")
        if self.splitting not in ("lie", "strang"):
            raise ValueError("splitting must be 'lie' or 'strang'")


@dataclass
class StepReport:
    accepted: np.ndarray
    delta_H: np.ndarray
    newton_iters: int
    lambda_half: np.ndarray
    lambda_one: np.ndarray
    accept_prob: np.ndarray = None
    diverged: np.ndarray = None


def consistent_penalty(dt, nubar, k):
    """Penalty nu = nubar dt^k that keeps the scheme consistent of order min(2, 2k)."""
    if not k > 0:
        raise ValueError("k must be positive")
    return nubar * dt**k


def acceptance_probability(delta_H, beta):
    with np.errstate(over="ignore"):
        return np.minimum(1.0, np.exp(-beta * np.asarray(delta_H, dtype=float)))


# ---------------------------------------------------------------------------
# forces


def _forces(model, pen, thermo, cfg, q, z, ws):
    F = -model.grad_potential(q)
    if cfg.fixman_in_forces and model.n_constraints and not model.is_linear and pen.nu > 0:
        F = F - fixman_gradient(model, pen, thermo, q, ws=ws)
    Fz = np.zeros_like(z)
    if model.coupling is not None:
        F = F - model.coupling.grad_q(q, z)
        Fz = -model.coupling.grad_z(q, z)
    return F, Fz


def _mz_solve(model, x):
    return model.mass_z.solve(x) if model.n_constraints else x


def _rattle(model, pen, thermo, cfg, s: PhaseState):
    """One leapfrog step; returns (state, report) with a per-replica diverged mask."""
    dt = cfg.dt
    half = 0.5 * dt
    inv_nu = pen.inv_nu
    batch = s.batch_shape
    n = model.n_constraints

    ws0 = gram(model, s.q, pen) if n else None
    F0, Fz0 = _forces(model, pen, thermo, cfg, s.q, s.z, ws0)
    pt = s.p + half * F0
    pzt = s.pz + half * Fz0
    q_base = s.q + dt * model.mass.solve(pt)
    z_base = s.z + dt * _mz_solve(model, pzt)

    lam = np.zeros(batch + (n,))
    iters = 0
    diverged = np.zeros(batch, dtype=bool)
    if n:
        c = inv_nu**2
        Mz_inv = model.mass_z.solve(np.eye(n)) if c else None
        MinvJn = ws0.MinvJ
        converged = np.zeros(batch, dtype=bool)
        for it in range(cfg.newton_max_iter + 1):
            q1 = q_base - dt * jac_vec(MinvJn, lam)
            z1 = z_base + (dt * inv_nu) * _mz_solve(model, lam) if inv_nu else z_base
            r = model.xi(q1) - inv_nu * z1 if inv_nu else model.xi(q1)
            err = np.max(np.abs(r), axis=-1)
            with np.errstate(invalid="ignore"):
                converged = err <= cfg.newton_tol
            if np.all(converged) or it == cfg.newton_max_iter:
                break
            if model.is_linear or cfg.frozen_jacobian:
                step = ws0.solve(r)
            else:
                A = jt_a_j(model.jacobian(q1), MinvJn)
                if c:
                    A = A + c * Mz_inv
                step = small_solve(A, r)
            step = np.where(converged[..., None], 0.0, step)
            lam = lam + step / dt
            iters += 1
        diverged = ~converged
        if np.any(diverged):
            # park diverged replicas on their start point so later
            # geometry evaluations stay finite; callers discard them
            lam = np.where(diverged[..., None], 0.0, lam)
            q1 = np.where(diverged[..., None], s.q, q1)
            z1 = np.where(diverged[..., None], s.z, z1)
        p_half = pt - jac_vec(ws0.J, lam)
        pz_half = pzt + inv_nu * lam if inv_nu else pzt
    else:
        q1, z1, p_half, pz_half = q_base, z_base, pt, pzt

    ws1 = gram(model, q1, pen) if n else None
    F1, Fz1 = _forces(model, pen, thermo, cfg, q1, z1, ws1)
    p1 = p_half + half * F1
    pz1 = pz_half + half * Fz1
    if n:
        p1, pz1, lam1 = project_momentum(model, pen, q1, p1, pz1, ws=ws1)
    else:
        lam1 = np.zeros(batch + (0,))
    out = PhaseState(q1, p1, z1, pz1)
    rep = StepReport(
        accepted=np.ones(batch, dtype=bool),
        delta_H=np.zeros(batch),
        newton_iters=iters,
        lambda_half=lam,
        lambda_one=lam1,
        diverged=diverged,
    )
    return out, rep


def rattle_step(model: SystemModel, pen: PenaltyConfig, thermo: ThermostatConfig, cfg: IntegratorConfig, s: PhaseState, rng=None):
    """Constrained leapfrog (RATTLE) step of the extended Hamiltonian.

    Half kick, drift with the position multiplier lambda_1/2 found by
    Newton iteration on xi(q') - z'/nu = 0, half kick, then projection of
    (p, p_z) onto the hidden constraint.  ``rng`` is unused.
    """
    thermo = thermo.bind(model)
    out, rep = _rattle(model, pen, thermo, cfg, s)
    if np.any(rep.diverged):
        raise NewtonDiverged(
            f"constraint solve failed for {int(np.sum(rep.diverged))} replica(s)",
            iterations=rep.newton_iters,
        )
    if cfg.check_constraints:
        check_constraints(model, pen, out, cfg.tol_c)
    return out, rep


def check_constraints(model, pen, s, tol):
    if model.n_constraints == 0:
        return
    rq = np.max(np.abs(position_residual(model, pen, s.q, s.z)))
    rp = np.max(np.abs(momentum_residual(model, pen, s.q, s.p, s.pz)))
    if not (rq <= tol and rp <= tol):
        raise AssertionError(f"constraint residuals {rq:.3g} (position), {rp:.3g} (momentum) exceed {tol:g}")


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck part


def ou_stability_bound(model: SystemModel, thermo: ThermostatConfig, dt):
    """(dt/2) times the largest friction rate of the extended system.

    The rate is the largest generalized eigenvalue of (gamma, M) and
    (gamma_z, M_z).  ``ou_midpoint_step`` refines its substeps until this
    is at most 1, so that the midpoint damping factor (1 - a)/(1 + a) of
    every mode stays nonnegative.
    """
    key = ("ou_rate", thermo)
    rate = model._cache.get(key)
    if rate is None:
        rate = generalized_max_eig(thermo.gamma, model.mass)
        if model.n_constraints:
            rate = max(rate, generalized_max_eig(thermo.gamma_z, model.mass_z))
        model._cache[key] = rate
    return 0.5 * dt * rate


def _sum_op(A, B, a):
    if A.diagonal is not None and B.diagonal is not None:
        return Diagonal(A.diagonal + a * B.diagonal)
    return Dense(A.matrix() + a * B.matrix())


class _OUWorkspace:
    """Factorizations for the shifted saddle-point system of one OU substep."""

    def __init__(self, model, pen, thermo, a, q):
        self.K = _sum_op(model.mass, thermo.gamma, a)
        n = model.n_constraints
        self.n = n
        if n == 0:
            return
        self.Kz = _sum_op(model.mass_z, thermo.gamma_z, a)
        J = model.jacobian(q)
        self.J = J
        self.KinvJ = mass_solve_columns(self.K, J)
        S = jt_a_j(J, self.KinvJ)
        c = pen.inv_nu**2
        if sp.issparse(S):
            if c:
                S = S + c * sp.csc_matrix(self.Kz.solve(np.eye(n)))
            self._lu = spla.splu(S.tocsc())
            self.S = None
        else:
            if c:
                S = S + c * self.Kz.solve(np.eye(n))
            self._lu = None
            self.S = S

    def solve_schur(self, rhs):
        if self._lu is not None:
            flat = rhs.reshape(-1, rhs.shape[-1])
            return self._lu.solve(flat.T).T.reshape(rhs.shape)
        return small_solve(self.S, rhs)


def _ou_workspace(model, pen, thermo, a, q):
    if model.is_linear:
        key = ("ou", pen.nu, a, thermo)
        ws = model._cache.get(key)
        if ws is None:
            ws = _OUWorkspace(model, pen, thermo, a, q)
            model._cache[key] = ws
        return ws
    return _OUWorkspace(model, pen, thermo, a, q)


def _ou_substep(model, pen, thermo, h, q, p, pz, U):
    """Midpoint OU on (p, p_z) with velocities kept on the hidden constraint.

    Solves  (M_e + a Gamma) V' + A lam = (M_e - a Gamma) V + sqrt(h) Sigma U,
    A^T V' = 0, with V = M_e^-1 (p, p_z), A = (grad_xi, -I/nu), a = h/2.
    """
    a = 0.5 * h
    d, n = model.dim, model.n_constraints
    sq = math.sqrt(h)
    v = model.mass.solve(p)
    R = p - a * thermo.gamma.apply(v) + sq * thermo.sigma_apply(U[..., :d])
    ws = _ou_workspace(model, pen, thermo, a, q)
    if n == 0:
        v1 = ws.K.solve(R)
        return model.mass.apply(v1), pz
    inv_nu = pen.inv_nu
    vz = model.mass_z.solve(pz)
    Rz = pz - a * thermo.gamma_z.apply(vz) + sq * thermo.sigma_z_apply(U[..., d:])
    rhs = jac_t_vec(ws.KinvJ, R)
    if inv_nu:
        rhs = rhs - inv_nu * ws.Kz.solve(Rz)
    lam = ws.solve_schur(rhs)
    v1 = ws.K.solve(R - jac_vec(ws.J, lam))
    vz1 = ws.Kz.solve(Rz + inv_nu * lam) if inv_nu else ws.Kz.solve(Rz)
    return model.mass.apply(v1), model.mass_z.apply(vz1)


_warned_substeps = set()


def ou_midpoint_step(model: SystemModel, pen: PenaltyConfig, thermo: ThermostatConfig, cfg: IntegratorConfig, s: PhaseState, rng, dt=None):
    """Constrained midpoint OU update of the extended momenta (positions fixed)."""
    thermo = thermo.bind(model)
    dt = cfg.dt if dt is None else dt
    k = cfg.ou_substeps
    while ou_stability_bound(model, thermo, dt / k) > 1.0:
        k *= 2
    if k != cfg.ou_substeps and (model.name, dt) not in _warned_substeps:
        _warned_substeps.add((model.name, dt))
        warnings.warn(f"OU step too large for the friction; using {k} substeps", RuntimeWarning)
    h = dt / k
    size = s.batch_shape + (model.dim + model.n_constraints,)
    p, pz = s.p, s.pz
    frictionless = thermo.frictionless
    for _ in range(k):
        U = rng.standard_normal(size)
        if not frictionless:
            p, pz = _ou_substep(model, pen, thermo, h, s.q, p, pz, U)
    if frictionless:
        p, pz = p.copy(), pz.copy()
    return PhaseState(s.q.copy(), p, s.z.copy(), pz)


# ---------------------------------------------------------------------------
# compositions


def _metropolized_rattle(model, pen, thermo, cfg, s, rng):
    H0 = immp_hamiltonian(model, pen, thermo, s)
    prop, rep = _rattle(model, pen, thermo, cfg, s)
    H1 = immp_hamiltonian(model, pen, thermo, prop)
    with np.errstate(invalid="ignore"):
        dH = np.where(rep.diverged, np.inf, H1 - H0)
    dH = np.where(np.isnan(dH), np.inf, dH)
    u = rng.random(s.batch_shape)
    prob = acceptance_probability(dH, thermo.beta)
    accepted = u < prob
    out = prop.where(accepted, s.flipped())
    rep.accepted = np.asarray(accepted)
    rep.delta_H = dH
    rep.accept_prob = prob
    return out, rep


def langevin_immp_step(model: SystemModel, pen: PenaltyConfig, thermo: ThermostatConfig, cfg: IntegratorConfig, s: PhaseState, rng):
    """Leapfrog (Hamiltonian part) followed by the OU part.

    With ``cfg.splitting == 'strang'`` the OU part is split in two halves
    around the leapfrog step.  With ``cfg.metropolis`` the leapfrog
    proposal is accepted or rejected (with momentum reversal) first.
    """
    thermo = thermo.bind(model)
    if cfg.splitting == "strang":
        s = ou_midpoint_step(model, pen, thermo, cfg, s, rng, dt=0.5 * cfg.dt)
    if cfg.metropolis:
        s, rep = _metropolized_rattle(model, pen, thermo, cfg, s, rng)
    else:
        s, rep = rattle_step(model, pen, thermo, cfg, s)
    ou_dt = 0.5 * cfg.dt if cfg.splitting == "strang" else cfg.dt
    s = ou_midpoint_step(model, pen, thermo, cfg, s, rng, dt=ou_dt)
    if cfg.check_constraints:
        check_constraints(model, pen, s, cfg.tol_c)
    return s, rep


def hmc_step(model: SystemModel, pen: PenaltyConfig, thermo: ThermostatConfig, cfg: IntegratorConfig, s: PhaseState, rng):
    """Generalized HMC: leapfrog proposal, Metropolis test on H_IMMP, OU refresh.

    A failed constraint solve counts as a rejection.  On rejection both
    p and p_z are reversed.
    """
    if not cfg.metropolis:
        cfg = _with(cfg, metropolis=True)
    return langevin_immp_step(model, pen, thermo, cfg, s, rng)


def _with(cfg, **kw):
    import dataclasses

    return dataclasses.replace(cfg, **kw)


def verlet_baseline_step(model: SystemModel, thermo: ThermostatConfig, cfg: IntegratorConfig, s: PhaseState, rng):
    """Velocity Verlet on H = 1/2 p M^-1 p + V(q), constraints ignored.

    The thermostat is the same midpoint OU update (without constraint);
    it draws d + n normals per substep like the penalized stepper so the
    two can be run on a common noise stream.  Optional Metropolis test on H.
    """
    thermo = thermo.bind(model)
    dt, half = cfg.dt, 0.5 * cfg.dt
    if cfg.splitting == "strang":
        s = _verlet_ou(model, thermo, cfg, s, rng, half)
    with np.errstate(over="ignore", invalid="ignore"):
        p = s.p - half * model.grad_potential(s.q)
        q1 = s.q + dt * model.mass.solve(p)
        p1 = p - half * model.grad_potential(q1)
    if not (np.all(np.isfinite(q1)) and np.all(np.isfinite(p1))):
        raise Unstable("Verlet trajectory became non-finite")
    prop = PhaseState(q1, p1, s.z.copy(), s.pz.copy())
    batch = s.batch_shape
    rep = StepReport(np.ones(batch, dtype=bool), np.zeros(batch), 0, np.zeros(batch + (0,)), np.zeros(batch + (0,)))
    if cfg.metropolis:
        H0 = kinetic_energy(model, s.p) + model.potential(s.q)
        H1 = kinetic_energy(model, p1) + model.potential(q1)
        dH = H1 - H0
        u = rng.random(batch)
        prob = acceptance_probability(dH, thermo.beta)
        acc = u < prob
        prop = prop.where(acc, PhaseState(s.q.copy(), -s.p, s.z.copy(), s.pz.copy()))
        rep.accepted, rep.delta_H, rep.accept_prob = np.asarray(acc), dH, prob
    s = _verlet_ou(model, thermo, cfg, prop, rng, half if cfg.splitting == "strang" else dt)
    return s, rep


def _verlet_ou(model, thermo, cfg, s, rng, dt):
    k = cfg.ou_substeps
    while ou_stability_bound(model, thermo, dt / k) > 1.0:
        k *= 2
    h = dt / k
    size = s.batch_shape + (model.dim + model.n_constraints,)
    p = s.p
    for _ in range(k):
        U = rng.standard_normal(size)
        if not thermo.gamma.is_zero:
            a = 0.5 * h
            v = model.mass.solve(p)
            R = p - a * thermo.gamma.apply(v) + math.sqrt(h) * thermo.sigma_apply(U[..., : model.dim])
            p = model.mass.apply(_sum_op(model.mass, thermo.gamma, a).solve(R))
    return PhaseState(s.q, p.copy() if p is s.p else p, s.z, s.pz)


# ---------------------------------------------------------------------------
# constrained initial states


def constrained_state(model: SystemModel, pen: PenaltyConfig, thermo: ThermostatConfig, q, rng, z=None):
    """State at q with z = nu xi(q) and canonical momenta on the hidden constraint.

    Momenta are drawn from N(0, beta^-1 diag(M, M_z)) and projected; the
    projection is orthogonal in the metric diag(M, M_z)^-1, so the result
    is exactly the constrained Gaussian.  For nu = inf, z must be given
    (defaults to zero).
    """
    thermo = thermo.bind(model)
    q = np.array(q, dtype=float)
    batch = q.shape[:-1]
    n = model.n_constraints
    if pen.is_infinite:
        z = np.zeros(batch + (n,)) if z is None else np.array(z, dtype=float)
    elif n:
        z = pen.nu * model.xi(q)
    else:
        z = np.zeros(batch + (0,))
    c = 1.0 / math.sqrt(thermo.beta)
    p = c * model.mass.sqrt_apply(rng.standard_normal(batch + (model.dim,)))
    pz = c * model.mass_z.sqrt_apply(rng.standard_normal(batch + (n,))) if n else np.zeros(batch + (0,))
    if n:
        p, pz, _ = project_momentum(model, pen, q, p, pz)
    return PhaseState(q, p, z, pz)


# ---------------------------------------------------------------------------
# tuning recipe


@dataclass
class TuneResult:
    nu_max: float
    dt_max: float
    slope: float
    table: list = field(default_factory=list)

    def rule(self, dt):
        """Linear penalty rule nu(dt) = (nu_max/dt_max) dt."""
        return self.slope * dt


def measure_acceptance(model, pen, thermo, cfg, init_state, n_steps, rng):
    """Mean Metropolis acceptance probability over n_steps HMC steps."""
    s = init_state
    acc = []
    for _ in range(n_steps):
        s, rep = hmc_step(model, pen, thermo, cfg, s, rng)
        acc.append(np.mean(rep.accept_prob))
    return float(np.mean(acc))


def tune_penalty(
    model: SystemModel,
    thermo: ThermostatConfig,
    target: float = 0.9,
    nu_grid: Sequence[float] = (0.0,),
    dt_grid: Sequence[float] = (0.01,),
    init_state: Optional[Callable] = None,
    n_steps: int = 100,
    seed: int = 0,
    baseline: Optional[Callable] = None,
    cfg_kwargs: Optional[dict] = None,
):
    """Search the (nu, dt) grid for the largest stable step at acceptance >= target.

    For each nu (ascending) the largest dt on the (ascending) grid whose
    measured mean acceptance is at least ``target`` is recorded.  nu_max is
    the smallest penalty reaching the overall largest such dt (a larger
    penalty no longer improves stability); the returned rule is
    nu = (nu_max/dt_max) dt.

    ``init_state(pen, rng)`` builds the starting state; nu = 0 runs
    ``baseline`` (defaults to Metropolized Verlet).  Each measurement uses
    its own generator seeded from ``seed``, so the search is reproducible.
    """
    from .rng import rng_stream

    if not 0 < target < 1:
        raise ValueError("target acceptance must lie in (0, 1)")
    cfg_kwargs = dict(cfg_kwargs or {})
    thermo = thermo.bind(model)
    table = []
    best = {}
    for i, nu in enumerate(sorted(nu_grid)):
        pen = PenaltyConfig.fixed(nu)
        best_dt = None
        for j, dt in enumerate(sorted(dt_grid)):
            cfg = IntegratorConfig(dt=dt, metropolis=True, **cfg_kwargs)
            rng = rng_stream(seed, 0, f"tune/{i}/{j}")
            s0 = init_state(pen, rng)
            try:
                if nu == 0:
                    r = _measure_baseline(model, thermo, cfg, s0, n_steps, rng, baseline)
                else:
                    r = measure_acceptance(model, pen, thermo, cfg, s0, n_steps, rng)
            except Unstable:
                r = 0.0
            table.append({"nu": nu, "dt": dt, "acceptance": r})
            if r >= target:
                best_dt = dt
            else:
                break
        if best_dt is not None:
            best[nu] = best_dt
    if not best:
        raise TargetUnreachable(f"no grid point reaches acceptance {target}")
    dt_max = max(best.values())
    nu_max = min(nu for nu, dt in best.items() if dt == dt_max)
    return TuneResult(nu_max, dt_max, nu_max / dt_max, table)


def _measure_baseline(model, thermo, cfg, s, n_steps, rng, baseline):
    step = baseline or verlet_baseline_step
    acc = []
    for _ in range(n_steps):
        s, rep = step(model, thermo, cfg, s, rng)
        acc.append(np.mean(rep.accept_prob))
    return float(np.mean(acc))
