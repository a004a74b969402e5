"""Exception hierarchy shared by the solver, estimator and prediction modules."""


class RobustRMTError(Exception):
    """Base class for all package errors."""


class DimensionError(RobustRMTError, ValueError):
    """Operands have incompatible shapes."""


class DomainError(RobustRMTError, ValueError):
    """An argument lies outside the domain of the operation."""

    def __init__(self, message, probe=None):
        super().__init__(message)
        self.probe = probe


class NumericalError(RobustRMTError, ArithmeticError):
    """A matrix assembly is singular or too ill-conditioned to invert."""


class DivergenceError(RobustRMTError):
    """A fixed-point iterate left the positive orthant or became non-finite."""

    def __init__(self, message, last_iterate=None, iteration=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iteration = iteration


class NonConvergenceError(RobustRMTError):
    """A fixed point required by a downstream computation did not converge."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class EstimatorError(RobustRMTError):
    """The robust weight fixed point could not be computed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MultiplicityError(RobustRMTError):
    """The top eigenvalue is not simple, so its eigenvector is undefined."""


class SpikeAbsentError(RobustRMTError):
    """No eigenvalue is isolated from the bulk."""


class ContourQualityError(RobustRMTError):
    """Contour quadrature left a large imaginary residue."""


class ConfigError(RobustRMTError, ValueError):
    """An experiment configuration is invalid."""
