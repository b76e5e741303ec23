"""Exception types shared across the package."""


class ActiveShiftError(Exception):
    pass


class ShapeError(ActiveShiftError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ActiveShiftError, ValueError):
    """A network or run configuration is invalid."""


class StateError(ActiveShiftError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class FormatError(ActiveShiftError, ValueError):
    """A data or checkpoint file does not match its binary format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UsageError(ActiveShiftError, ValueError):
    """Bad arguments to a reporting or CLI-facing function."""
