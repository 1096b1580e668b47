"""Exception types shared across the package."""


class LaserError(Exception):
    """Base class for all package errors."""


class DimensionError(LaserError, ValueError):
    pass


class NumericError(LaserError, ArithmeticError):
    pass


class FormatError(LaserError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class LoadError(LaserError, OSError):
    pass


class ConfigError(LaserError, ValueError):
    pass
