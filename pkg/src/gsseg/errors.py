"""Exception types shared across the package.

The CLI maps these onto exit codes (usage 2, state 3, data 4), so new
failure modes should reuse one of the classes below instead of raising
bare exceptions.
"""


class GssegError(Exception):
    """Base class for all package-specific errors."""


class FormatError(GssegError):
    """A file does not match its documented schema or layout."""


class DataError(GssegError):
    """A file parsed correctly but contains invalid values."""


class StateError(GssegError):
    """An operation was issued against missing or stale state."""


class ConfigError(GssegError):
    """A configuration is inconsistent with the inputs it is applied to."""
