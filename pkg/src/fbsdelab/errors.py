"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class DecoupledSystemError(InvalidInputError):
    """Raised when gamma is undefined because k1 = k2 = k4 = k5 = 0."""


class InvalidModeError(ValueError):
    """Raised when an operation is invoked in a mode it does not support."""


class RegressionError(RuntimeError):
    """Raised when a regression stays singular after the ridge fallback."""


class DivergenceError(RuntimeError):
    """Raised when too many forward paths blow up."""

    def __init__(self, message, fraction=float("nan")):
        super().__init__(message)
        self.fraction = fraction


class CoverageError(RuntimeError):
    """Raised when too many path-time points fall outside a field lattice."""


class NonConvergenceError(RuntimeError):
    """Raised when a solve that must converge does not."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class OracleUnavailableError(RuntimeError):
    """Raised when an analytic oracle has no admissible solution."""
