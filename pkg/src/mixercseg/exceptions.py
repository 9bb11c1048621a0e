"""Exception hierarchy shared across the package."""


class MixerCSegError(Exception):
    """Base class for all package errors."""


class ShapeError(MixerCSegError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(MixerCSegError, ValueError):
    """An invalid configuration value (stride, ratio, resolution, ...)."""


class UsageError(MixerCSegError, RuntimeError):
    """An API was called in a state where it cannot run."""


class NumericError(MixerCSegError, ArithmeticError):
    """A computation produced non-finite values."""

    def __init__(self, message: str, step: int | None = None) -> None:
        super().__init__(message)
        self.step = step


class ImageIOError(MixerCSegError, OSError):
    """A file could not be read or decoded as an image."""
