"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A configuration or scenario definition is invalid."""


class ProtocolError(RuntimeError):
    """An operation was called in a state its contract forbids."""
