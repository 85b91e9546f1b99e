"""Exception and warning types shared across the package."""


class CscError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(CscError, ValueError):
    """Inputs have the wrong shape, an unsupported value, or fail validation."""


class DegenerateGeometryError(CscError):
    """Contact geometry is not usable (deep overlap, coincident centres)."""


class InfeasibleStartError(CscError):
    """No strictly feasible starting point could be found for the barrier solve."""


class NonConvergenceError(CscError):
    """An iterative solver stopped without meeting its tolerance.

    ``residual`` holds the last residual the solver saw.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class RolloutError(CscError):
    """A dynamics step failed inside a rollout; ``t`` is the offending knot."""

    def __init__(self, message, t, cause=None):
        super().__init__(f"{message} (at t={t})")
        self.t = t
        self.cause = cause


class ConditioningWarning(RuntimeWarning):
    """The barrier Hessian used for implicit differentiation is ill-conditioned."""
