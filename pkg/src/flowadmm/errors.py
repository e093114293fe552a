"""Exception types shared across the package."""


class FlowAdmmError(Exception):
    """Base class for all package errors."""


class ParameterError(FlowAdmmError, ValueError):
    """An argument lies outside its admissible range."""


class ShapeError(FlowAdmmError, ValueError):
    """Tensor shapes are incompatible or degenerate."""


class UnsupportedError(FlowAdmmError, TypeError):
    """The requested operation is not defined for this prior or operator."""


class ConvergenceError(FlowAdmmError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DivergenceError(FlowAdmmError, RuntimeError):
    """A solver iterate became non-finite or exceeded the divergence guard."""

    def __init__(self, message, iteration=None, norm=None):
        super().__init__(message)
        self.iteration = iteration
        self.norm = norm


class AssumptionError(FlowAdmmError, ValueError):
    """Hypotheses of a convergence result are not met."""


class TrainingDivergedError(FlowAdmmError, RuntimeError):
    """Flow-matching training produced a non-finite loss."""


class ConfigError(FlowAdmmError, ValueError):
    """A run configuration could not be parsed or validated."""
