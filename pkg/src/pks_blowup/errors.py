"""Exception hierarchy shared by every module.

Each class maps onto one failure family so the command line front end can
translate it into a stable exit code.
"""


class PKSError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PKSError, ValueError):
    """Invalid parameters, unknown keys or out-of-range inputs."""


class RangeError(ConfigurationError):
    """Evaluation point outside the admissible domain."""


class UsageError(PKSError, TypeError):
    """A field was passed with the wrong role tag."""


class NumericError(PKSError, ArithmeticError):
    """Non-finite values, divergent integrals or failed linear algebra."""


class DegenerateProfileError(NumericError):
    """The localized profile is not positive."""


class InstabilityError(NumericError):
    """Time stepping blew up; retry with a smaller step."""


class ResolutionError(NumericError):
    """Resampling error exceeded the tolerated threshold."""


class DecompositionError(NumericError):
    """Newton iteration for the modulation parameters did not converge."""


class InvalidDataError(ConfigurationError):
    """Initial data violate a hard requirement (for example a negative density)."""


class SubcriticalWarning(UserWarning):
    """Total mass at or below 8 pi: the run is allowed but no blow-up is expected."""
