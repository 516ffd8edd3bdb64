"""Exception types raised by keytrain."""


class KeytrainError(ValueError):
    """Base class for all keytrain validation failures."""


class InvalidParameter(KeytrainError):
    """A scalar or structural argument is outside its allowed range."""


class InvalidInput(KeytrainError):
    """A matrix or vector argument violates a required structure (Hermitian, PSD, sorted...)."""


class ConfigError(KeytrainError):
    """A scenario configuration file could not be parsed or validated."""
