"""Exception types shared across the package."""


class NhlError(Exception):
    """Base class for all package errors."""


class DimensionError(NhlError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ParameterError(NhlError, ValueError):
    """A scalar hyperparameter is outside its valid range."""


class CheckpointFormatError(NhlError, ValueError):
    """A checkpoint/container file is malformed or inconsistent."""


class DataFormatError(NhlError, ValueError):
    """A dataset file (IDX or container) is malformed."""


class NonFiniteError(NhlError, ArithmeticError):
    """An update or loss produced NaN/Inf; the offending site is named."""


class UsageError(NhlError, RuntimeError):
    """An API object was used out of protocol (e.g. tape reused)."""


class ConfigError(NhlError, ValueError):
    """Run configuration failed validation; message lists every bad field."""
