# %% [markdown]
# # Choosing the penalty and running the harness
#
# `tune_penalty` scans a (nu, dt) grid and returns the smallest penalty
# reaching the largest step at a target acceptance, together with the
# linear rule nu(dt).  The experiment harness wraps the same drivers the
# command line uses, so a run can also be scripted.

# %%
import numpy as np

from immp import PhaseState, constrained_state, tune_penalty
from immp.chain import ChainModel, build_chain_system, chain_equilibrium_harmonic

ch = ChainModel(32, interaction="harmonic", external=False)
model, thermo = build_chain_system(ch), ch.thermostat()


def init(pen, rng):
    q, _ = chain_equilibrium_harmonic(ch, 32, rng)
    if pen.nu == 0:
        return PhaseState.create(q, rng.standard_normal(q.shape) / np.sqrt(thermo.beta), n=ch.N - 1)
    return constrained_state(model, pen, thermo, q, rng)


res = tune_penalty(model, thermo, 0.9, [0.0, 1.0, 3.2, 10.0], np.geomspace(1e-3, 1.0, 25), init, n_steps=5, seed=0)
print(f"nu_max={res.nu_max}, dt_max={res.dt_max:.4f}, rule nu = {res.slope:.1f} dt")

# %%
from immp.config import merge
from immp.experiments import default_config, run_experiment

cfg = merge(default_config("stiff-demo"), {"run": {"replicas": 200, "steps": 50}})
report, wall = run_experiment(cfg)
for name, ok in report.checks.items():
    print("PASS" if ok else "FAIL", name)
print(f"{len(report.rows)} rows in {wall:.1f} s")
