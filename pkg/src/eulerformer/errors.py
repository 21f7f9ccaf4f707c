"""Exception types shared across the package."""


class EulerformerError(Exception):
    """Base class for all package errors."""


class ConfigError(EulerformerError, ValueError):
    """Invalid configuration, shapes or arguments."""


class DomainError(EulerformerError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class NumericError(EulerformerError, ArithmeticError):
    """A computation produced a non-finite value."""


class StateError(EulerformerError, RuntimeError):
    """An operation was called in an invalid order."""


class DataError(EulerformerError, ValueError):
    """Malformed or inconsistent data."""


class SearchError(EulerformerError, RuntimeError):
    """Every trial of a schedule search failed."""
