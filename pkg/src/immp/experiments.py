"""Experiment drivers behind the command line interface.

Each driver takes a RunConfig and returns a Report: long-format rows
(group, x, y, yerr), a summary dict and named pass/fail checks.  Every
random draw comes from ``rng_stream(seed, replica, tag)`` with a tag
naming the grid point, so results do not depend on the order in which
grid points are evaluated (``threads`` > 1 only changes scheduling).
"""
from __future__ import annotations

import copy
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .chain import ChainModel, build_chain_system, chain_equilibrium_harmonic
from .config import RunConfig
from .errors import ConfigError, InsufficientCrossings, NewtonDiverged, TargetUnreachable, Unstable
from .integrators import (
    IntegratorConfig,
    constrained_state,
    langevin_immp_step,
    rattle_step,
    tune_penalty,
    verlet_baseline_step,
)
from .model import PenaltyConfig, PhaseState, ThermostatConfig, immp_hamiltonian, kinetic_energy
from .rng import rng_stream
from .spectral import (
    critical_timestep,
    energy_variation_moments,
    asymptotic_moments,
    critical_dt_scaling_exponent,
    h_mode,
    leapfrog_matrix,
    predicted_critical_dt,
)
from .stats import (
    TimeSeries,
    autocorrelation,
    center_of_mass,
    chain_length,
    chi2_histogram_test,
    kde_density,
    mean_transition_time,
    relative_entropy,
)
from .stiff import circle_stiff_model, epsilon_sweep
from .systems import double_well, double_well_density


@dataclass
class Report:
    experiment: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)

    def add(self, group, x, y, yerr=float("nan")):
        self.rows.append((str(group), float(x), float(y), float(yerr)))

    def add_series(self, group, xs, ys, yerrs=None):
        yerrs = np.full(len(xs), np.nan) if yerrs is None else yerrs
        for x, y, e in zip(xs, ys, yerrs):
            self.add(group, x, y, e)

    @property
    def passed(self):
        return all(self.checks.values())


def _map(fn, tasks, threads):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, tasks))


def _integrator(cfg: RunConfig, **override) -> IntegratorConfig:
    kw = dict(cfg.integrator)
    kw.update(override)
    return IntegratorConfig(**kw)


def _chain(cfg: RunConfig, N=None, nubar=0.0) -> ChainModel:
    m, th = cfg.model, cfg.thermostat
    return ChainModel(
        N=int(N if N is not None else m["N"]),
        nubar=float(nubar),
        beta=th["beta"],
        gamma=th["gamma"],
        gamma_z=th["gamma_z"],
        interaction=m["interaction"],
        external=m["external"],
        continuous_cutoff=m["continuous_cutoff"],
    )


# ---------------------------------------------------------------------------
# defaults

_INTEGRATOR = {
    "dt": 0.01,
    "newton_tol": 1e-10,
    "newton_max_iter": 50,
    "tol_c": 1e-9,
    "fixman_in_forces": True,
    "metropolis": False,
    "ou_substeps": 1,
    "splitting": "lie",
}

_CHAIN_MODEL = {"kind": "chain", "N": 100, "interaction": "double_well", "external": True, "continuous_cutoff": False}
_CHAIN_THERMO = {"beta": 10.0, "gamma": 0.1, "gamma_z": 0.0}


def _defaults():
    return {
        "exactness": RunConfig(
            experiment="exactness",
            seed=1,
            replicas=1_000_000,
            steps=20,
            output="out/exactness",
            model={"kind": "double_well", "height": 1.0, "mass": 1.0, "mass_z": 1.0},
            integrator={**_INTEGRATOR, "dt": 0.4, "metropolis": True},
            thermostat={"beta": 3.0, "gamma": 0.5, "gamma_z": 0.5},
            penalty={"nu": 1.0},
            params={
                "nu_grid": [0.1, 1.0, 10.0],
                "scale_dt": True,
                "bins": 44,
                "x_min": -2.2,
                "x_max": 2.2,
                "p_min": 0.01,
                "unadjusted_dt": 1e-3,
                "unadjusted_steps": 20,
                "unadjusted_p_min": 1e-4,
            },
        ),
        "spectral-verify": RunConfig(
            experiment="spectral-verify",
            seed=2,
            replicas=4,
            steps=100_000,
            output="out/spectral-verify",
            model={**_CHAIN_MODEL, "N": 64, "interaction": "harmonic", "external": False},
            integrator={**_INTEGRATOR},
            thermostat={"beta": 10.0, "gamma": 0.0, "gamma_z": 0.0},
            penalty={"nu": 0.0},
            params={
                "nubar_grid": [0.0, 0.3],
                "cfl_factors": [0.95, 1.05],
                "blowup": 1000.0,
                "record_every": 100,
                "moment_samples": 100_000,
                "moment_dt_fraction": 0.8,
                "normality_N": 256,
                "normality_samples": 5000,
                "asymptotic_N": 512,
                "asymptotic_dt_penalized": 0.1,
                "asymptotic_dt_verlet": 1e-4,
            },
        ),
        "test2-stability": RunConfig(
            experiment="test2-stability",
            seed=3,
            replicas=128,
            steps=1,
            output="out/test2-stability",
            model={**_CHAIN_MODEL},
            integrator={**_INTEGRATOR},
            thermostat={**_CHAIN_THERMO},
            penalty={"nu": 0.0},
            params={
                "N_grid": [64, 128, 256, 512],
                "nubar2_grid": [1e-2, 1e-3],
                "verlet": True,
                "burn_time": 2.0,
                "burn_dt": 2e-3,
                "burn_nubar": 0.1,
                "dt_min": 1e-6,
                "dt_max": 1.0,
                "dt_points": 61,
                "target": 0.5,
                "alpha_penalized": [0.10, 0.30],
                "alpha_verlet": [1.0, 1.3],
                "check_nubar2": 1e-2,
            },
        ),
        "test1-macro": RunConfig(
            experiment="test1-macro",
            seed=4,
            replicas=32,
            steps=0,
            output="out/test1-macro",
            model={**_CHAIN_MODEL},
            integrator={**_INTEGRATOR, "dt": 5e-4},
            thermostat={**_CHAIN_THERMO},
            penalty={"nu": 0.0},
            params={
                "N_grid": [100],
                "nubar2_grid": [1e-2],
                "dt_grid": [5e-4],
                "verlet": True,
                "verlet_dt": 5e-5,
                "burn_time": 5.0,
                "burn_dt": 1e-3,
                "burn_nubar": 0.1,
                "relax_time": 2.0,
                "eq_time": 10.0,
                "sample_every": 1e-3,
                "a": 0.4,
                "b": 0.6,
                "min_events": 50,
                "max_lag": 2.0,
                "entropy_windows": 10,
                "expected_ratio": 1.6,
                "ratio_tolerance": 0.2,
                "check_nubar2": 1e-2,
            },
        ),
        "stiff-demo": RunConfig(
            experiment="stiff-demo",
            seed=5,
            replicas=2000,
            steps=400,
            output="out/stiff-demo",
            model={"kind": "stiff", "nubar": 1.0, "mass": [1.0, 4.0], "a1": 1.0, "a2": 0.5},
            integrator={**_INTEGRATOR, "dt": 0.05, "metropolis": True, "newton_tol": 1e-11},
            thermostat={"beta": 1.0, "gamma": 1.0, "gamma_z": 1.0},
            penalty={"nu": 0.0},
            params={"eps_list": [0.1, 0.01, 0.001], "acceptance_spread": 0.05, "ks_p_min": 0.01},
        ),
        "tune": RunConfig(
            experiment="tune",
            seed=6,
            replicas=64,
            steps=20,
            output="out/tune",
            model={**_CHAIN_MODEL, "N": 64, "interaction": "harmonic", "external": False},
            integrator={**_INTEGRATOR},
            thermostat={**_CHAIN_THERMO},
            penalty={"nu": 0.0},
            params={
                "target": 0.9,
                "nubar_grid": [0.0, 0.03, 0.1, 0.3, 1.0],
                "dt_min": 1e-4,
                "dt_max": 1.0,
                "dt_points": 40,
            },
        ),
    }


EXPERIMENTS = ("exactness", "test1-macro", "test2-stability", "spectral-verify", "stiff-demo", "tune")


def default_config(name) -> RunConfig:
    d = _defaults()
    if name not in d:
        raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    return copy.deepcopy(d[name])


# ---------------------------------------------------------------------------
# exactness: double-well HMC against the quadrature Boltzmann law


def _boltzmann_bins(beta, height, edges):
    f = lambda x: double_well_density(x, beta, height)
    probs = np.array([integrate.quad(f, a, b, epsabs=0, epsrel=1e-11)[0] for a, b in zip(edges[:-1], edges[1:])])
    Z = integrate.quad(f, -np.inf, np.inf, epsabs=0, epsrel=1e-11)[0]
    return probs / Z


def _boltzmann_cdf(beta, height, lo, hi, n=20001):
    x = np.linspace(lo, hi, n)
    c = integrate.cumulative_trapezoid(double_well_density(x, beta, height), x, initial=0.0)
    c /= c[-1]
    return lambda y: np.interp(y, x, c)


def exact_double_well_samples(n, beta, height, lo, hi, rng):
    """Rejection sampling of exp(-beta V) on [lo, hi] (V >= 0, so the bound is 1)."""
    out = []
    count = 0
    while count < n:
        x = rng.uniform(lo, hi, 2 * (n - count) + 100)
        x = x[rng.random(x.size) < double_well_density(x, beta, height)]
        out.append(x)
        count += x.size
    return np.concatenate(out)[:n]


def exactness(cfg: RunConfig) -> Report:
    P, th = cfg.params, cfg.thermostat
    beta, height = th["beta"], cfg.model["height"]
    model = double_well(height, cfg.model["mass"], cfg.model["mass_z"])
    thermo = ThermostatConfig(beta, th["gamma"], th["gamma_z"])
    edges = np.linspace(P["x_min"], P["x_max"], P["bins"] + 1)
    probs = _boltzmann_bins(beta, height, edges)
    cdf = _boltzmann_cdf(beta, height, P["x_min"], P["x_max"])
    rep = Report("exactness")
    centers = 0.5 * (edges[1:] + edges[:-1])
    width = np.diff(edges)
    rep.add_series("boltzmann", centers, probs / width)

    runs = [(i, nu, True) for i, nu in enumerate(P["nu_grid"])]
    runs.append((len(runs), 1.0, False))

    def one(task):
        i, nu, adjusted = task
        rng = rng_stream(cfg.seed, i, f"exactness/{nu}/{adjusted}")
        pen = PenaltyConfig.fixed(nu)
        q = exact_double_well_samples(cfg.replicas, beta, height, P["x_min"], P["x_max"], rng)[:, None]
        s = constrained_state(model, pen, thermo, q, rng)
        if adjusted:
            dt = cfg.integrator["dt"] * (math.sqrt(1 + nu * nu) if P["scale_dt"] else 1.0)
            icfg = _integrator(cfg, dt=dt, metropolis=True)
            n_steps = cfg.steps
        else:
            icfg = _integrator(cfg, dt=P["unadjusted_dt"], metropolis=False)
            n_steps = P["unadjusted_steps"]
        acc = []
        for _ in range(n_steps):
            s, r = langevin_immp_step(model, pen, thermo, icfg, s, rng)
            if r.accept_prob is not None:
                acc.append(float(np.mean(r.accept_prob)))
        x = s.q[:, 0]
        chi2, p, dof = chi2_histogram_test(x, edges, probs)
        ks = stats.kstest(x, cdf)
        counts, _ = np.histogram(x, edges)
        return dict(nu=nu, adjusted=adjusted, dt=icfg.dt, chi2=chi2, p=p, dof=dof, ks=float(ks.statistic),
                    ks_p=float(ks.pvalue), acceptance=float(np.mean(acc)) if acc else 1.0, counts=counts)

    results = _map(one, runs, cfg.threads)
    n = cfg.replicas
    for r in results:
        tag = f"nu={r['nu']:g}" + ("" if r["adjusted"] else " unadjusted")
        dens = r["counts"] / (n * width)
        rep.add_series(tag, centers, dens, np.sqrt(r["counts"]) / (n * width))
        rep.add("chi2_pvalue", r["nu"] if r["adjusted"] else -r["nu"], r["p"])
        rep.add("ks_pvalue", r["nu"] if r["adjusted"] else -r["nu"], r["ks_p"])
        rep.add("acceptance", r["nu"] if r["adjusted"] else -r["nu"], r["acceptance"])
        r = {k: v for k, v in r.items() if k != "counts"}
        rep.summary[tag] = r
        if r["adjusted"]:
            rep.checks[f"chi2 p > {P['p_min']} at {tag}"] = r["p"] > P["p_min"]
        else:
            rep.checks[f"chi2 p > {P['unadjusted_p_min']} without Metropolis"] = r["p"] > P["unadjusted_p_min"]
    return rep


# ---------------------------------------------------------------------------
# spectral-verify: CFL boundary and energy-variation moments on the harmonic chain


def _harmonic_chain(cfg, N, nubar):
    ch = _chain(cfg, N=N, nubar=nubar)
    if ch.interaction != "harmonic" or ch.external:
        raise ConfigError("spectral-verify needs the pure harmonic chain (interaction='harmonic', external=false)")
    return ch


def chain_energy(model, pen, thermo, s, verlet):
    if verlet:
        return kinetic_energy(model, s.p) + model.potential(s.q)
    return immp_hamiltonian(model, pen, thermo, s)


def harmonic_start(ch, model, n, rng):
    """Canonical start of the harmonic chain; PhaseState for rattle (nubar > 0) or Verlet."""
    q, p_nu = chain_equilibrium_harmonic(ch, n, rng)
    if ch.nubar == 0:
        return PhaseState.create(q, p_nu, n=ch.N - 1)
    from .model import state_from_penalized_momentum

    return state_from_penalized_momentum(model, ch.penalty(), q, p_nu)


def cfl_run(ch, factor, n_steps, n_rep, rng, blowup=1e3, record_every=100, cfg_kwargs=None):
    """Deterministic run at dt = factor * dt_c; returns (times, max energy ratio, diverged)."""
    model = build_chain_system(ch)
    thermo = ThermostatConfig(ch.beta_N)
    dt = factor * critical_timestep(ch.N, ch.nubar)
    verlet = ch.nubar == 0
    pen = ch.penalty()
    s = harmonic_start(ch, model, n_rep, rng)
    E0 = chain_energy(model, pen, thermo, s, verlet)
    # the Fixman term of a linear chain is a constant; measure energy above it
    base = immp_hamiltonian(model, pen, thermo, PhaseState.create(np.zeros(ch.N), n=ch.N - 1)) if not verlet else 0.0
    E0 = E0 - base
    icfg = IntegratorConfig(dt=dt, **(cfg_kwargs or {}))
    times, ratios = [0.0], [1.0]
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, n_steps + 1):
            try:
                if verlet:
                    s, _ = verlet_baseline_step(model, thermo, icfg, s, rng)
                else:
                    s, _ = rattle_step(model, pen, thermo, icfg, s)
            except (Unstable, NewtonDiverged):
                # growth so large that the constraint solve loses precision
                diverged = True
                times.append(k * dt)
                ratios.append(float("inf"))
                break
            if k % record_every == 0 or k == n_steps:
                E = chain_energy(model, pen, thermo, s, verlet) - base
                ratio = float(np.max(E / E0)) if np.all(np.isfinite(E)) else float("inf")
                times.append(k * dt)
                ratios.append(ratio)
                if ratio > blowup:
                    diverged = True
                    break
    return np.array(times), np.array(ratios), diverged


def energy_variation_samples(ch, dt, n, rng, chunk=10_000):
    """beta_N dH after one leapfrog step from canonical starts (integrator, not closed form)."""
    model = build_chain_system(ch)
    thermo = ThermostatConfig(ch.beta_N)
    pen = ch.penalty()
    verlet = ch.nubar == 0
    icfg = IntegratorConfig(dt=dt)
    out = []
    for start in range(0, n, chunk):
        s = harmonic_start(ch, model, min(chunk, n - start), rng)
        E0 = chain_energy(model, pen, thermo, s, verlet)
        if verlet:
            s1, _ = verlet_baseline_step(model, thermo, icfg, s, rng)
        else:
            s1, _ = rattle_step(model, pen, thermo, icfg, s)
        out.append(ch.beta_N * (chain_energy(model, pen, thermo, s1, verlet) - E0))
    return np.concatenate(out)


def moment_check(x, m, v):
    """Mean and variance of samples against (m, v); returns (z_mean, z_var)."""
    n = x.size
    c = x - x.mean()
    se_mean = math.sqrt(v / n)
    se_var = math.sqrt(max(np.mean(c**4) - np.mean(c**2) ** 2, 1e-300) / n)
    return (x.mean() - m) / se_mean, (x.var() - v) / se_var


def spectral_verify(cfg: RunConfig) -> Report:
    P = cfg.params
    N = cfg.model["N"]
    rep = Report("spectral-verify")
    tasks = [(i, nb) for i, nb in enumerate(P["nubar_grid"])]

    def one(task):
        i, nubar = task
        ch = _harmonic_chain(cfg, N, nubar)
        res = {"nubar": nubar, "dt_c": critical_timestep(N, nubar), "cfl": {}}
        for j, f in enumerate(P["cfl_factors"]):
            rng = rng_stream(cfg.seed, i, f"cfl/{nubar}/{f}")
            t, r, div = cfl_run(ch, f, cfg.steps, cfg.replicas, rng, P["blowup"], P["record_every"],
                                {"newton_tol": cfg.integrator["newton_tol"], "tol_c": cfg.integrator["tol_c"]})
            res["cfl"][f] = (t, r, div)
        dt = P["moment_dt_fraction"] * predicted_critical_dt(N, nubar, 0.5)
        x = energy_variation_samples(ch, dt, P["moment_samples"], rng_stream(cfg.seed, i, f"moments/{nubar}"))
        m, v = energy_variation_moments(N, dt, nubar)
        zm, zv = moment_check(x, m, v)
        res.update(moment_dt=dt, mc_mean=float(x.mean()), mc_var=float(x.var()), mean=m, var=v, z_mean=zm, z_var=zv)
        chN = _harmonic_chain(cfg, P["normality_N"], nubar)
        dtN = P["moment_dt_fraction"] * predicted_critical_dt(chN.N, nubar, 0.5)
        y = energy_variation_samples(chN, dtN, P["normality_samples"], rng_stream(cfg.seed, i, f"normality/{nubar}"))
        ad = stats.anderson((y - y.mean()) / y.std())
        res["anderson"] = float(ad.statistic)
        res["anderson_crit_1pct"] = float(ad.critical_values[-1])
        Na = P["asymptotic_N"]
        dta = P["asymptotic_dt_penalized"] if nubar > 0 else P["asymptotic_dt_verlet"]
        ma, va = energy_variation_moments(Na, dta, nubar)
        aa, av = asymptotic_moments(Na, dta, nubar)
        res.update(asym_mean_ratio=ma / aa, asym_var_ratio=va / av)
        h = h_mode(dt, N, nubar, np.arange(1, N))
        res["max_det_error"] = float(max(abs(np.linalg.det(leapfrog_matrix(hk)) - 1) for hk in h))
        return res

    for res in _map(one, tasks, cfg.threads):
        nb = res.pop("nubar")
        for f, (t, r, div) in res.pop("cfl").items():
            rep.add_series(f"energy ratio nubar={nb:g} dt={f:g}dt_c", t, r)
            rep.summary[f"nubar={nb:g} cfl {f:g}"] = {"diverged": div, "max_ratio": float(np.max(r))}
            if f < 1:
                rep.checks[f"bounded at {f:g} dt_c, nubar={nb:g}"] = not div
            else:
                rep.checks[f"diverges at {f:g} dt_c, nubar={nb:g}"] = div
        rep.add("mc mean", nb, res["mc_mean"], math.sqrt(res["var"] / P["moment_samples"]))
        rep.add("exact mean", nb, res["mean"])
        rep.add("mc variance", nb, res["mc_var"])
        rep.add("exact variance", nb, res["var"])
        rep.summary[f"nubar={nb:g}"] = res
        rep.checks[f"mean within 3 s.e., nubar={nb:g}"] = abs(res["z_mean"]) <= 3
        rep.checks[f"variance within 3 s.e., nubar={nb:g}"] = abs(res["z_var"]) <= 3
        rep.checks[f"asymptotics within 5%, nubar={nb:g}"] = (
            abs(res["asym_mean_ratio"] - 1) < 0.05 and abs(res["asym_var_ratio"] - 1) < 0.05
        )
        rep.checks[f"det L_k = 1, nubar={nb:g}"] = res["max_det_error"] < 1e-12
        rep.checks[f"near-normal energy variation, nubar={nb:g}"] = res["anderson"] < res["anderson_crit_1pct"]
    return rep


# ---------------------------------------------------------------------------
# test2-stability: acceptance against dt and the critical-step scaling


def chain_equilibrium_positions(ch: ChainModel, n, rng, burn_time=2.0, burn_dt=2e-3, burn_nubar=0.1):
    """Approximately canonical positions of the chain.

    The harmonic chain is sampled exactly.  Otherwise particles start as
    sorted draws from the external well (the ordered-gas approximation of
    the repulsive chain) and are equilibrated by Metropolized penalized
    Langevin steps, which leave the canonical law invariant.
    """
    if ch.interaction == "harmonic" and not ch.external:
        return chain_equilibrium_harmonic(ch, n, rng)[0]
    sd = 2.2 / math.sqrt(2 * ch.beta_N)
    q = np.sort(0.5 + sd * rng.standard_normal((n, ch.N)), axis=-1)
    if burn_time <= 0:
        return q
    bch = ChainModel(ch.N, burn_nubar, ch.beta, ch.gamma, ch.gamma_z, ch.interaction, ch.external, ch.continuous_cutoff)
    model, pen, th = build_chain_system(bch), bch.penalty(), bch.thermostat()
    s = constrained_state(model, pen, th, q, rng)
    icfg = IntegratorConfig(dt=burn_dt, metropolis=True)
    for _ in range(int(round(burn_time / burn_dt))):
        s, _ = langevin_immp_step(model, pen, th, icfg, s, rng)
    return s.q


def one_step_acceptance(model, pen, thermo, s0, dt, verlet):
    """Mean min(1, exp(-beta dH)) of one leapfrog step from the states s0."""
    with np.errstate(over="ignore", invalid="ignore"):
        E0 = chain_energy(model, pen, thermo, s0, verlet)
        try:
            if verlet:
                # frictionless, so the thermostat noise drawn here is discarded
                s1, _ = verlet_baseline_step(model, thermo, IntegratorConfig(dt=dt), s0, np.random.default_rng(0))
            else:
                s1, _ = rattle_step(model, pen, thermo, IntegratorConfig(dt=dt), s0)
            dH = chain_energy(model, pen, thermo, s1, verlet) - E0
        except (Unstable, NewtonDiverged):
            return 0.0
        a = np.minimum(1.0, np.exp(-thermo.beta * dH))
    a[~np.isfinite(a)] = 0.0
    return float(a.mean())


def critical_dt_from_curve(dts, acc, target=0.5):
    """First crossing of ``target`` by linear interpolation in log dt."""
    dts, acc = np.asarray(dts), np.asarray(acc)
    below = np.flatnonzero(acc < target)
    if below.size == 0 or below[0] == 0:
        raise TargetUnreachable("acceptance curve does not cross the target inside the grid")
    i = below[0]
    x0, x1 = math.log(dts[i - 1]), math.log(dts[i])
    y0, y1 = acc[i - 1], acc[i]
    return math.exp(x0 + (target - y0) * (x1 - x0) / (y1 - y0))


def acceptance_curve(ch, q0, branch_nubar, dts, rng, stop=0.2):
    """One-step acceptance on a dt grid with common random momenta."""
    c = ChainModel(ch.N, branch_nubar, ch.beta, ch.gamma, ch.gamma_z, ch.interaction, ch.external, ch.continuous_cutoff)
    model, pen = build_chain_system(c), c.penalty()
    thermo = ThermostatConfig(c.beta_N)
    verlet = branch_nubar == 0
    if verlet:
        p = rng.standard_normal(q0.shape) / math.sqrt(c.beta_N)
        s0 = PhaseState.create(q0, p, n=c.N - 1)
    else:
        s0 = constrained_state(model, pen, thermo, q0, rng)
    out = []
    for dt in dts:
        out.append(one_step_acceptance(model, pen, thermo, s0, dt, verlet))
        if out[-1] < stop:
            break
    return np.array(dts[: len(out)]), np.array(out)


def scaling_exponent(Ns, dts):
    """alpha in dt_crit ~ N^-alpha by least squares in log-log."""
    return float(-np.polyfit(np.log(Ns), np.log(dts), 1)[0])


def test2_stability(cfg: RunConfig) -> Report:
    P = cfg.params
    rep = Report("test2-stability")
    branches = [math.sqrt(x) for x in P["nubar2_grid"]] + ([0.0] if P["verlet"] else [])
    dts = np.geomspace(P["dt_min"], P["dt_max"], P["dt_points"])

    def one(task):
        i, N = task
        ch = _chain(cfg, N=N)
        q0 = chain_equilibrium_positions(ch, cfg.replicas, rng_stream(cfg.seed, i, f"equilibrium/{N}"),
                                         P["burn_time"], P["burn_dt"], P["burn_nubar"])
        res = {}
        for nb in branches:
            x, a = acceptance_curve(ch, q0, nb, dts, rng_stream(cfg.seed, i, f"acceptance/{N}/{nb}"))
            try:
                dtc = critical_dt_from_curve(x, a, P["target"])
            except TargetUnreachable:
                dtc = float("nan")
            res[nb] = (x, a, dtc)
        return N, res

    results = dict(_map(one, list(enumerate(P["N_grid"])), cfg.threads))
    Ns = np.array(sorted(results))
    for nb in branches:
        label = "verlet" if nb == 0 else f"nubar2={nb * nb:g}"
        crit = []
        for N in Ns:
            x, a, dtc = results[N][nb]
            rep.add_series(f"acceptance N={N} {label}", x, a)
            crit.append(dtc)
            rep.add(f"critical dt {label}", N, dtc)
        crit = np.array(crit)
        ok = np.isfinite(crit)
        alpha = scaling_exponent(Ns[ok], crit[ok]) if ok.sum() >= 2 else float("nan")
        theory = critical_dt_scaling_exponent(nb)
        rep.add("alpha", nb * nb, alpha)
        rep.summary[label] = {"critical_dt": dict(zip(map(int, Ns), map(float, crit))), "alpha": alpha, "theory": theory}
        if nb == 0:
            lo, hi = P["alpha_verlet"]
            rep.checks[f"verlet exponent in [{lo}, {hi}]"] = bool(lo <= alpha <= hi)
        elif abs(nb * nb - P["check_nubar2"]) < 1e-12:
            lo, hi = P["alpha_penalized"]
            rep.checks[f"{label} exponent in [{lo}, {hi}]"] = bool(lo <= alpha <= hi)
    if ch_is_harmonic(cfg):
        for nb in branches:
            for N in Ns:
                rep.add(f"predicted critical dt nubar={nb:g}", N, predicted_critical_dt(int(N), nb, P["target"]))
    return rep


def ch_is_harmonic(cfg):
    return cfg.model["interaction"] == "harmonic" and not cfg.model["external"]


# ---------------------------------------------------------------------------
# test1-macro: macroscopic observables of the anharmonic chain


def run_chain_series(ch, q0, dt, duration, sample_every, rng):
    """Langevin run (Verlet for nubar = 0) from positions q0 with canonical
    momenta; returns sampled (l(t), c(t)) of shape (replicas, samples)."""
    model, th = build_chain_system(ch), ch.thermostat()
    icfg = IntegratorConfig(dt=dt)
    if ch.nubar == 0:
        s = PhaseState.create(q0, rng.standard_normal(q0.shape) / math.sqrt(th.beta), n=ch.N - 1)
        step = lambda s: verlet_baseline_step(model, th, icfg, s, rng)[0]
    else:
        pen = ch.penalty()
        s = constrained_state(model, pen, th, q0, rng)
        step = lambda s: langevin_immp_step(model, pen, th, icfg, s, rng)[0]
    every = max(1, int(round(sample_every / dt)))
    n = int(round(duration / dt))
    L, C = [], []
    for k in range(n):
        s = step(s)
        if k % every == every - 1:
            L.append(chain_length(s.q))
            C.append(center_of_mass(s.q))
    return np.array(L).T, np.array(C).T, every * dt


def central_start(N, n):
    """Out-of-equilibrium start with every particle at the centre q = 0.5."""
    return np.full((n, N), 0.5)


def test1_macro(cfg: RunConfig) -> Report:
    P = cfg.params
    rep = Report("test1-macro")
    if len(P["dt_grid"]) != len(P["nubar2_grid"]):
        raise ConfigError("params.dt_grid must have one step per entry of params.nubar2_grid")
    settings = [(math.sqrt(x), dt) for x, dt in zip(P["nubar2_grid"], P["dt_grid"])]
    if P["verlet"]:
        settings.append((0.0, P["verlet_dt"]))
    tasks = [(N, nb, dt) for N in P["N_grid"] for nb, dt in settings]
    starts = {}
    for j, N in enumerate(P["N_grid"]):
        ch = _chain(cfg, N=N)
        starts[N] = chain_equilibrium_positions(ch, cfg.replicas, rng_stream(cfg.seed, j, f"equilibrium/{N}"),
                                                P["burn_time"], P["burn_dt"], P["burn_nubar"])

    def one(task):
        N, nb, dt = task
        ch = _chain(cfg, N=N, nubar=nb)
        out = {}
        if P["relax_time"] > 0:
            L, C, h = run_chain_series(ch, central_start(N, cfg.replicas), dt, P["relax_time"], P["sample_every"],
                                       rng_stream(cfg.seed, 0, f"relax/{N}/{nb}"))
            out["relax"] = (L, C, h)
        L, C, h = run_chain_series(ch, starts[N], dt, P["eq_time"], P["sample_every"], rng_stream(cfg.seed, 0, f"eq/{N}/{nb}"))
        out["eq"] = (L, C, h)
        return (N, nb), out

    results = dict(_map(one, tasks, cfg.threads))
    table = {}
    for (N, nb), out in sorted(results.items()):
        label = f"N={N} " + ("verlet" if nb == 0 else f"nubar2={nb * nb:g}")
        L, C, h = out["eq"]
        try:
            tau, se, count = mean_transition_time([TimeSeries(c, h) for c in C], P["a"], P["b"], min_events=1)
        except InsufficientCrossings:
            tau, se, count = float("nan"), float("nan"), 0
        table[(N, nb)] = (tau, se, count)
        lags = int(round(P["max_lag"] / h))
        for name, X in (("length", L), ("center", C)):
            rho = autocorrelation(X, lags).mean(axis=0)
            rep.add_series(f"autocorrelation {name} {label}", h * np.arange(lags + 1), rho)
            grid, dens = kde_density(X.ravel())
            rep.add_series(f"pdf {name} {label}", grid, dens)
        if "relax" in out:
            Lr, Cr, hr = out["relax"]
            for name, X, Xeq in (("length", Lr, L), ("center", Cr, C)):
                # one grid covering both the relaxing and the equilibrium samples
                grid = np.linspace(min(X.min(), Xeq.min()) - 1.0, max(X.max(), Xeq.max()) + 1.0, 1024)
                _, ref = kde_density(Xeq.ravel(), grid)
                w = max(1, X.shape[1] // P["entropy_windows"])
                ts, ent = [], []
                for k in range(0, X.shape[1] - w + 1, w):
                    _, d = kde_density(X[:, k : k + w].ravel(), grid)
                    ts.append(hr * (k + w / 2))
                    ent.append(relative_entropy(d, ref, grid))
                rep.add_series(f"relative entropy {name} {label}", ts, ent)
                rep.summary[f"relative entropy {name} {label}"] = ent
                if len(ent) > 1:
                    rep.checks[f"relative entropy of {name} decreases, {label}"] = bool(ent[-1] < ent[0])
        rep.add_series(f"center {label}", h * np.arange(1, C.shape[1] + 1), C[0])
        rep.add_series(f"length {label}", h * np.arange(1, L.shape[1] + 1), L[0])
    for N in P["N_grid"]:
        ref = table.get((N, 0.0))
        for (n_, nb), (tau, se, count) in sorted(table.items()):
            if n_ != N:
                continue
            norm = ref[0] if ref else float("nan")
            ratio = tau / norm
            ratio_se = ratio * math.sqrt((se / tau) ** 2 + (ref[1] / norm) ** 2) if ref else float("nan")
            rep.add(f"transition time N={N}", nb * nb, tau, se)
            rep.add(f"normalized transition time N={N}", nb * nb, ratio, ratio_se)
            rep.summary[f"tau N={N} nubar2={nb * nb:g}"] = {"tau": tau, "se": se, "events": count, "normalized": ratio}
            if abs(nb * nb - P["check_nubar2"]) < 1e-12 and N == 100 and ref:
                exp, tol = P["expected_ratio"], P["ratio_tolerance"]
                rep.checks[f"normalized tau(N=100, nubar2={nb * nb:g}) = {exp} +- {tol}"] = bool(abs(ratio - exp) <= tol)
            if nb == 0 and ref:
                rep.checks[f"verlet normalized tau(N={N}) = 1.0 +- 0.2"] = bool(abs(ratio - 1.0) <= 0.2)
            rep.checks[f"at least {P['min_events']} events, N={N} nubar2={nb * nb:g}"] = count >= P["min_events"]
    return rep


# ---------------------------------------------------------------------------
# stiff-demo


def stiff_demo(cfg: RunConfig) -> Report:
    from .systems import CosineProfile

    P, M, th = cfg.params, cfg.model, cfg.thermostat
    stiff = circle_stiff_model(P["eps_list"][0], M["nubar"], CosineProfile(M["a1"], M["a2"]), tuple(M["mass"]))
    thermo = ThermostatConfig(th["beta"], th["gamma"], th["gamma_z"])
    dt = cfg.integrator["dt"]
    rows, _ = epsilon_sweep(stiff, P["eps_list"], dt, thermo, n_replicas=cfg.replicas, n_steps=cfg.steps,
                            seed=cfg.seed, metropolis=cfg.integrator["metropolis"])
    rep = Report("stiff-demo")
    for r in rows:
        rep.add("observable", r.epsilon, r.observable_mean, r.observable_se)
        rep.add("acceptance", r.epsilon, r.acceptance)
        rep.add("ks_pvalue", r.epsilon, r.ks_pvalue)
        rep.add("ks_statistic", r.epsilon, r.ks_statistic)
        rep.add("verlet_unstable", r.epsilon, float(r.verlet_unstable))
        rep.summary[f"eps={r.epsilon:g}"] = r.__dict__
    acc = [r.acceptance for r in rows]
    smallest = min(rows, key=lambda r: r.epsilon)
    rep.checks[f"acceptance spread < {P['acceptance_spread']}"] = max(acc) - min(acc) < P["acceptance_spread"]
    rep.checks[f"KS p > {P['ks_p_min']} at eps={smallest.epsilon:g}"] = smallest.ks_pvalue > P["ks_p_min"]
    # the fast radial mode has frequency up to 2/eps: Verlet needs dt < eps
    below = [r for r in rows if r.epsilon < 0.5 * dt]
    above = [r for r in rows if r.epsilon > 2.0 * dt]
    rep.checks["verlet diverges below the CFL threshold"] = all(r.verlet_unstable for r in below) and bool(below)
    rep.checks["verlet stable above the CFL threshold"] = not any(r.verlet_unstable for r in above)
    return rep


# ---------------------------------------------------------------------------
# tune


def tune(cfg: RunConfig) -> Report:
    P = cfg.params
    ch = _chain(cfg)
    model = build_chain_system(ch)
    thermo = ch.thermostat()

    def init(pen, rng):
        c = ChainModel(ch.N, pen.nu / ch.N, ch.beta, ch.gamma, ch.gamma_z, ch.interaction, ch.external, ch.continuous_cutoff)
        q = chain_equilibrium_positions(c, cfg.replicas, rng, burn_time=0.0)
        if pen.nu == 0:
            return PhaseState.create(q, rng.standard_normal(q.shape) / math.sqrt(thermo.beta), n=ch.N - 1)
        return constrained_state(model, pen, thermo, q, rng)

    rep = Report("tune")
    nu_grid = [nb * ch.N for nb in P["nubar_grid"]]
    dts = np.geomspace(P["dt_min"], P["dt_max"], P["dt_points"])
    try:
        res = tune_penalty(model, thermo, P["target"], nu_grid, dts, init, cfg.steps, cfg.seed)
    except TargetUnreachable as e:
        rep.summary["error"] = str(e)
        rep.checks["target reachable"] = False
        return rep
    for row in res.table:
        rep.add(f"acceptance nubar={row['nu'] / ch.N:g}", row["dt"], row["acceptance"])
    rep.summary.update(nu_max=res.nu_max, dt_max=res.dt_max, slope=res.slope, nubar_max=res.nu_max / ch.N)
    rep.checks["target reachable"] = True
    return rep


DRIVERS = {
    "exactness": exactness,
    "test1-macro": test1_macro,
    "test2-stability": test2_stability,
    "spectral-verify": spectral_verify,
    "stiff-demo": stiff_demo,
    "tune": tune,
}


def run_experiment(cfg: RunConfig) -> tuple:
    """Run the driver for ``cfg.experiment``; returns (report, wall time in seconds)."""
    t0 = time.perf_counter()
    rep = DRIVERS[cfg.experiment](cfg)
    return rep, time.perf_counter() - t0
