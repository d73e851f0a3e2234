"""Exception hierarchy shared by the library and the command line front end."""


class MixOrderError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 4


class ArgumentError(MixOrderError, ValueError):
    """Inputs have the wrong shape, range or type."""

    exit_code = 2


class DomainError(MixOrderError, ValueError):
    """A matrix that must be symmetric positive definite is not."""


class DataError(MixOrderError):
    """Input data could not be read or is malformed."""

    exit_code = 3


class NumericError(MixOrderError, ArithmeticError):
    """A numerical routine failed (underflow, non-convergence, bad conditioning)."""


class DegenerateComponentError(NumericError):
    """A mixture component lost all of its posterior mass."""


class NonConvergenceError(NumericError):
    """No EM chain converged; ``best`` carries the best partial result."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class PartitionError(NumericError):
    """Fitted means are too close together to build the box partition."""


class ConditioningError(NumericError):
    """An information block is too badly conditioned to invert."""
