"""Exception hierarchy shared across the package."""


class BsdeLabError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(BsdeLabError, ValueError):
    """Bad user input: unknown names, out-of-range parameters, missing data."""


class StepSizeError(BsdeLabError):
    """A partition step violates a scheme's contraction precondition."""


class FixedPointError(BsdeLabError):
    """Picard iteration failed to reach tolerance; carries the last residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericalDomainError(BsdeLabError):
    """Non-finite values encountered where finite ones are required."""


class ResourceLimitError(BsdeLabError):
    """A configured resource budget (e.g. tree node count) would be exceeded."""


class UnsupportedProblemError(BsdeLabError):
    """The requested operation does not support this problem's driver class."""
