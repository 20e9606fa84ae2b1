class HTPriorError(Exception):
    """Base class for errors raised by htprior."""


class ConfigurationError(HTPriorError, ValueError):
    """Shapes, sizes or settings that cannot work together."""


class UsageError(HTPriorError, RuntimeError):
    """An API called out of order (backward without a recorded pass, etc.)."""


class LoadError(HTPriorError, OSError):
    """A file on disk is missing, corrupt or of the wrong format."""
