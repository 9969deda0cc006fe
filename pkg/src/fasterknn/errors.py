"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (vocabulary sizes, ranges, missing stores)."""


class UsageError(ValueError):
    """A call violated an operation's preconditions."""


class StoreFormatError(Exception):
    """A persisted binary could not be decoded."""
