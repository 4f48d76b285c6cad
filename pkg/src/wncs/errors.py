"""Exception hierarchy shared by all modules."""


class WncsError(Exception):
    """Base class for every error raised by this package."""


class DomainError(WncsError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConstructionError(WncsError, ValueError):
    """A channel or certificate could not be assembled from its inputs."""


class DimensionError(WncsError, ValueError):
    """Operand shapes are inconsistent."""


class NumericalError(WncsError, ArithmeticError):
    """A numerical routine failed to reach the requested accuracy."""


class NoSolutionError(NumericalError):
    """A Riccati iteration diverged.

    ``trace`` holds the Frobenius norm of the iterate at every step, so the
    caller can see how fast the divergence happened.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class UnstableSystemError(NumericalError):
    """The closed loop is not mean-square stable where stability is required."""


class ConsistencyError(WncsError, RuntimeError):
    """A post-condition check on a computed solution failed."""
