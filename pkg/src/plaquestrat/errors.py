"""Exception types shared across the package.

The CLI maps :class:`UsageError` to exit code 1 and every other subclass of
:class:`PlaqueStratError` to exit code 2.
"""


class PlaqueStratError(Exception):
    """Base class for all package errors."""


class UsageError(PlaqueStratError):
    """Invalid call sequence or command-line usage."""


class ShapeError(PlaqueStratError, ValueError):
    """Array extents do not agree with what an operation expects."""


class ParameterError(PlaqueStratError, ValueError):
    """A hyperparameter or argument is outside its valid range."""


class FormatError(PlaqueStratError, ValueError):
    """A file could not be decoded."""


class ConfigError(PlaqueStratError, ValueError):
    """A configuration document failed validation."""


class InfeasibleSplitError(PlaqueStratError, ValueError):
    """Stratified partitioning is impossible for the given class/group counts."""


class UndefinedMetricError(PlaqueStratError, ValueError):
    """A metric is undefined because a class is missing."""


class SingularSystemError(PlaqueStratError, ArithmeticError):
    """Normal equations could not be solved."""


class NonFiniteGradientError(PlaqueStratError, FloatingPointError):
    """A gradient contained NaN or Inf."""
