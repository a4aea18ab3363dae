"""Exception types shared across the package."""


class XmedError(Exception):
    """Base class for all xmed errors."""


class ShapeError(XmedError, ValueError):
    """Raised when tensor shapes are incompatible.

    The message names the offending shape(s) so the failure is diagnosable
    without a debugger.
    """

    def __init__(self, message, got=None, expected=None):
        if got is not None:
            message = f"{message}: got {tuple(got)}"
        if expected is not None:
            message = f"{message}, expected {tuple(expected)}"
        super().__init__(message)
        self.got = tuple(got) if got is not None else None
        self.expected = tuple(expected) if expected is not None else None


class ConfigError(XmedError, ValueError):
    """Invalid configuration (hyperparameters, dataset layout, CLI args)."""


class StaleCacheError(XmedError, RuntimeError):
    """A backward pass was called without a matching forward cache."""


class FormatError(XmedError, ValueError):
    """Model file is malformed. Carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DataError(XmedError, ValueError):
    """Dataset ingestion failure (undecodable files, empty tree)."""


class MetricUndefinedError(XmedError, ValueError):
    """A metric has no defined value for the given inputs."""
