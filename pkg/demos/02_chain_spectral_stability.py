# %% [markdown]
# # Stability of the penalized harmonic chain
#
# For the chain xi_i = q_{i+1} - q_i the penalized mass is Id - nubar^2 Delta,
# diagonal in the cosine basis.  Each mode k is a leapfrog rotation with
# reduced step h_k = dt sqrt(delta_k) / sqrt(1 + nubar^2 delta_k), so the
# scheme is stable iff all h_k <= 2.

# %%
import numpy as np

from immp.experiments import acceptance_curve, cfl_run, critical_dt_from_curve
from immp.chain import ChainModel, chain_equilibrium_harmonic
from immp.spectral import critical_timestep, energy_variation_moments, predicted_acceptance, predicted_critical_dt
from immp.rng import rng_stream

N = 64
for nubar in (0.0, 0.1, 0.3):
    print(f"nubar={nubar}: dt_c={critical_timestep(N, nubar):.4f}")

# %% [markdown]
# Just below dt_c the energy stays bounded, just above it explodes.

# %%
for nubar in (0.0, 0.3):
    ch = ChainModel(N, nubar, interaction="harmonic", external=False, gamma=0.0)
    for f in (0.95, 1.05):
        t, ratio, diverged = cfl_run(ch, f, 5000, 2, rng_stream(1, 0, f"cfl/{nubar}/{f}"))
        print(f"nubar={nubar} dt={f} dt_c: max energy ratio {ratio.max():.3g}, diverged={diverged}")

# %% [markdown]
# The energy error of one step from equilibrium is close to Gaussian with
# closed-form mean and variance, which predicts the Metropolis acceptance.
# Below we compare the prediction with measured one-step acceptance.

# %%
dts = np.geomspace(1e-4, 1.0, 40)
for nubar in (0.0, 0.1):
    ch = ChainModel(N, 0.0, interaction="harmonic", external=False)
    q0, _ = chain_equilibrium_harmonic(ch, 256, rng_stream(2, 0, "q0"))
    x, a = acceptance_curve(ch, q0, nubar, dts, rng_stream(2, 0, f"acc/{nubar}"))
    dt = critical_dt_from_curve(x, a)
    m, v = energy_variation_moments(N, dt, nubar)
    print(f"nubar={nubar}: measured dt(0.5)={dt:.4g}, predicted {predicted_critical_dt(N, nubar):.4g}, "
          f"predicted acceptance there {predicted_acceptance(N, dt, nubar):.3f} (mean dH {m:.3f}, var {v:.3f})")

# %% [markdown]
# With a penalty the critical step decays like N^(-1/6) instead of
# N^(-7/6); `immp test2-stability` measures the exponent over N = 64..512.
