"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A layer, model or benchmark configuration is invalid."""


class InputError(ValueError):
    """Runtime data (labels, subject ids, point sets) is invalid."""


class UsageError(RuntimeError):
    """An API was called in a state where the call makes no sense."""


class FormatError(ValueError):
    """A dataset file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""
