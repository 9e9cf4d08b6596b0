"""Exception types shared across the package."""


class ReflectError(Exception):
    """Base class for all package errors."""


class ShapeError(ReflectError, ValueError):
    pass


class NumericError(ReflectError, FloatingPointError):
    """An operation produced NaN or Inf."""


class StateError(ReflectError, RuntimeError):
    pass


class DataError(ReflectError, ValueError):
    pass


class GenError(ReflectError, RuntimeError):
    """Scene generation could not satisfy its constraints."""


class FormatError(ReflectError, ValueError):
    """Malformed file contents (PGM header, checkpoint magic, ...)."""


class ConfigError(ReflectError, ValueError):
    pass


class AdaptError(ReflectError, RuntimeError):
    """Adaptation produced a non-finite loss."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step
