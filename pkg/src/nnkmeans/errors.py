"""Exception types shared across the library."""


class NnkError(Exception):
    """Base class for all library errors."""


class DataError(NnkError):
    """Malformed, inconsistent, or out-of-budget input data."""


class NumericalError(NnkError):
    """A numerical routine failed to produce a usable result."""


class NnlsMaxIterError(NumericalError):
    """Active-set iteration budget exhausted.

    Carries the best feasible iterate found so far in ``best``; usually a
    sign of an ill-conditioned support matrix.
    """

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best
