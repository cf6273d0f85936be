"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/data/checkpoint problems
are caller errors (exit 2), everything else is a runtime failure (exit 1).
"""


class FedsegError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FedsegError, ValueError):
    """Tensor or weight-vector dimensions do not satisfy an operation's contract."""


class ConfigError(FedsegError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class DataError(FedsegError, ValueError):
    """A dataset, sample, or data directory violates its contract."""


class CheckpointError(FedsegError, ValueError):
    """A checkpoint file is corrupt or does not match the model architecture."""


class UsageError(FedsegError, RuntimeError):
    """An operation was invoked in a state it does not support."""
