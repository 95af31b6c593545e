"""Exception types shared across the package."""


class RaidError(Exception):
    """Base class for errors raised by this package."""


class InterchangeError(RaidError):
    """Malformed, truncated, or corrupt file payload."""


class ConfigMismatchError(InterchangeError):
    """A loaded artifact was produced under an incompatible configuration."""
