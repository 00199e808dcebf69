"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of its legal range."""


class NumericError(ArithmeticError):
    """A forward or backward pass produced a non-finite value."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class DatasetError(ValueError):
    """A dataset cannot satisfy a structural requirement (size, diversity, labels)."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is malformed: bad magic, version, or tensor metadata."""


class CheckpointCorruptionError(CheckpointFormatError):
    """A checkpoint file is truncated or fails its integrity check."""
