"""Exception hierarchy shared across the package."""


class JetflowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(JetflowError, ValueError):
    """Inconsistent problem, scheme or solver configuration."""


class GridError(JetflowError, ValueError):
    """Malformed time grid or incompatible grid refinement."""


class NumericalDomainError(JetflowError, ArithmeticError):
    """A function returned non-finite values where finite ones were required."""


class DivergenceError(JetflowError, ArithmeticError):
    """A trajectory or ODE flow produced a non-finite state.

    Attributes
    ----------
    index : int
        Last index at which the state was still finite.
    partial : object
        Partial result (trajectory or list of flow states) up to ``index``.
    """

    def __init__(self, message, index=None, partial=None):
        super().__init__(message)
        self.index = index
        self.partial = partial


class DomainError(DivergenceError):
    """A state left the domain on which the problem coefficients are defined."""
