"""Exception hierarchy shared by every module."""


class IADNError(Exception):
    """Base class for all package errors."""


class ShapeError(IADNError, ValueError):
    """Tensor dimensions do not fit the requested operation."""


class NumericDomainError(IADNError, ArithmeticError):
    """A NaN or infinity reached an operation boundary."""


class UsageError(IADNError, RuntimeError):
    """An API was called outside its contract."""


class ConfigError(IADNError, ValueError):
    """A configuration violates one of its invariants."""


class DataError(IADNError, ValueError):
    """Input data is malformed, missing, or degenerate."""


class FormatVersionError(DataError):
    """A file declares a format version this build cannot read."""


class EvaluationError(IADNError, ValueError):
    """The evaluation protocol cannot be applied to the given data."""
