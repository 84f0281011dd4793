"""Exception types shared across the package."""


class AaditError(Exception):
    pass


class ConfigError(AaditError, ValueError):
    """Inconsistent dimensions or invalid configuration values."""


class InputError(AaditError, ValueError):
    """Bad data handed to an operation (labels out of range, empty sequences)."""


class NumericalError(AaditError, FloatingPointError):
    """A loss or gradient became non-finite."""


class FormatError(AaditError, ValueError):
    """A persisted file failed validation while loading."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InternalError(AaditError, RuntimeError):
    """Misuse of a cache or trace object (stale or mismatched)."""
