"""Exception types raised by the samplers and analysis routines."""


class IMMPError(Exception):
    """Base class for all package errors."""


class SolverFailure(IMMPError):
    """A linear solve did not reach the requested residual."""


class GramSingular(IMMPError):
    """The constraint Gram matrix is singular or too badly conditioned."""

    def __init__(self, message, q=None, cond=None):
        super().__init__(message)
        self.q = q
        self.cond = cond


class MissingSecondDerivatives(IMMPError):
    """Fixman forces need the Hessian of the constraint, which was not supplied."""


class NewtonDiverged(IMMPError):
    """The nonlinear solve for the Lagrange multiplier did not converge."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class Unstable(IMMPError):
    """A trajectory blew up (non-finite or runaway energy)."""


class TargetUnreachable(IMMPError):
    """No (penalty, step) pair on the search grid reaches the acceptance target."""


class QuadratureDivergent(IMMPError):
    """The integration window for an effective potential could not be closed."""


class InsufficientCrossings(IMMPError):
    """Too few transitions between metastable sets to form an estimate."""

    def __init__(self, message, count=0):
        super().__init__(message)
        self.count = count


class ConfigError(IMMPError):
    """An experiment configuration is malformed."""
