"""Exception types shared across the package."""


class PoisonLabError(Exception):
    """Base class for all package errors."""


class DataError(PoisonLabError, ValueError):
    """Malformed, missing or inconsistent input data."""


class NumericalError(PoisonLabError, ArithmeticError):
    """A solver or gradient computation failed to produce a usable result."""


class ConvergenceWarning(UserWarning):
    """Coordinate descent stopped at ``max_iter`` before meeting ``tol``."""
