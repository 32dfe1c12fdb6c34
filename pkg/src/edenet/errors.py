"""Exception types shared across modules (numeric ones live in :mod:`edenet.numerics`)."""


class UsageError(ValueError):
    """Caller asked for something the operation does not support."""


class ConfigError(ValueError):
    """A configuration value violates its invariants."""


class FormatError(OSError):
    """A file is truncated, has a bad header, or disagrees with its sidecar."""
