"""Package exception types."""


class DualTeacherError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(DualTeacherError):
    """Invalid configuration value or unknown/missing config key."""


class CheckpointError(DualTeacherError):
    """Malformed or inconsistent checkpoint/dataset file."""


class NonFiniteLossError(DualTeacherError):
    """A loss or gradient became NaN/Inf during training."""
