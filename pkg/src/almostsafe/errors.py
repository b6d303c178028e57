"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inconsistent system, schedule, or experiment configuration."""


class PreconditionError(ValueError):
    """An operation was called outside its documented domain."""


class NumericError(ArithmeticError):
    """A simulation produced a non-finite value."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ResourceError(MemoryError):
    """A lattice would exceed the configured index-space limit."""
