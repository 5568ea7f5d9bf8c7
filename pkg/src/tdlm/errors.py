"""Exception types shared across the package."""


class TdlmError(Exception):
    """Base class for all package errors."""


class ShapeError(TdlmError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ParameterError(TdlmError, ValueError):
    """A configuration value or hyperparameter is out of range."""


class ValidationError(TdlmError, ValueError):
    """An input violates a documented precondition (e.g. non-normalized distribution)."""


class StateError(TdlmError, RuntimeError):
    """An object is used in an invalid state (e.g. second backward on one tape)."""


class ConfigError(TdlmError, ValueError):
    """Artifacts that must match do not (e.g. teacher/student vocabularies)."""


class NumericsError(TdlmError, ArithmeticError):
    """A forward operation produced NaN/Inf from finite inputs."""


class FormatError(TdlmError, ValueError):
    """A file does not conform to its documented format."""


class VersionError(FormatError):
    """A persisted artifact carries an unsupported format version."""
