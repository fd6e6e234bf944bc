"""Exception hierarchy.

Data problems (bad input files, violated design assumptions) derive from
``DataError``; failures of a numerical procedure derive from
``NumericalError``. The CLI maps these to distinct exit codes.
"""


class CaceError(Exception):
    """Base class for all package errors."""


class DataError(CaceError, ValueError):
    pass


class NumericalError(CaceError, ArithmeticError):
    pass


class SingularDesignError(NumericalError):
    pass


class WeakInstrumentError(NumericalError):
    pass


class BoundaryError(NumericalError):
    """An arm-level proportion sits on 0 or 1."""


class SEFailureError(NumericalError):
    """Standard errors unavailable; ``estimate`` carries the point estimate."""

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate
