"""Exception types shared across the solver."""


class SolverError(Exception):
    """Base class for all solver errors."""


class NonDivisibleDomain(SolverError):
    """State spacing does not tile an axis of the domain box."""


class DimensionMismatch(SolverError):
    """An array or point has the wrong dimension for the problem."""


class NegativeProbability(SolverError):
    """A transition probability came out below -1e-12; the stepsizes are
    infeasible for the model (e.g. the time step is too large)."""


class EmptyControlGrid(SolverError):
    """The grid-search control set is empty."""


class LengthMismatch(SolverError):
    """Two sequences that must align have different lengths."""


class InvalidParams(SolverError):
    """Model parameters violate their admissibility constraints."""


class OutOfHorizon(SolverError):
    """A time argument lies outside [0, T]."""


class NonFiniteEvaluation(SolverError):
    """An objective evaluation returned NaN or infinity."""


class ConfigError(SolverError):
    """A run configuration is missing keys or has invalid values."""
