"""Implicit mass-matrix penalization (IMMP) samplers.

The fast degrees of freedom xi(q) of a Hamiltonian system are slowed
down by adding nu^2 grad_xi M_z grad_xi^T to the mass matrix through an
extended, constrained Hamiltonian.  With the Fixman correction the
position marginal stays exactly Boltzmann for every penalty nu.
"""
from .errors import (
    ConfigError,
    GramSingular,
    InsufficientCrossings,
    MissingSecondDerivatives,
    NewtonDiverged,
    QuadratureDivergent,
    SolverFailure,
    TargetUnreachable,
    Unstable,
)
from .model import (
    PenaltyConfig,
    PhaseState,
    SystemModel,
    ThermostatConfig,
    immp_hamiltonian,
    penalized_hamiltonian,
    penalized_mass_apply,
    penalized_mass_solve,
)
from .geometry import fixman_gradient, fixman_potential, gram, project_momentum
from .integrators import (
    IntegratorConfig,
    StepReport,
    consistent_penalty,
    constrained_state,
    hmc_step,
    langevin_immp_step,
    ou_midpoint_step,
    rattle_step,
    tune_penalty,
    verlet_baseline_step,
)
from .rng import rng_stream

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "GramSingular",
    "InsufficientCrossings",
    "MissingSecondDerivatives",
    "NewtonDiverged",
    "QuadratureDivergent",
    "SolverFailure",
    "TargetUnreachable",
    "Unstable",
    "PenaltyConfig",
    "PhaseState",
    "SystemModel",
    "ThermostatConfig",
    "immp_hamiltonian",
    "penalized_hamiltonian",
    "penalized_mass_apply",
    "penalized_mass_solve",
    "fixman_gradient",
    "fixman_potential",
    "gram",
    "project_momentum",
    "IntegratorConfig",
    "StepReport",
    "consistent_penalty",
    "constrained_state",
    "hmc_step",
    "langevin_immp_step",
    "ou_midpoint_step",
    "rattle_step",
    "tune_penalty",
    "verlet_baseline_step",
    "rng_stream",
]
