"""Exception types shared across the package."""


class ClsrError(Exception):
    """Base class for all package errors."""


class ConfigError(ClsrError, ValueError):
    """Invalid configuration value or inconsistent configuration."""


class ShapeError(ClsrError, ValueError):
    """Array or situation shape does not match what an operation expects."""


class StateError(ClsrError, RuntimeError):
    """An object is used before it has been put into the required state."""


class NumericError(ClsrError, ArithmeticError):
    """A computation hit a degenerate value (zero norm, NaN loss, ...)."""


class EmptyDatasetError(ClsrError, ValueError):
    """A data preparation step produced no usable records."""


class CheckpointError(ClsrError, ValueError):
    """A checkpoint or index file is malformed or has an unsupported version."""


class InputError(ClsrError, ValueError):
    """Caller supplied inconsistent input, e.g. an unknown situation id."""
