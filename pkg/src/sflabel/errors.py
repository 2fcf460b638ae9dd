"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A caller passed a value that violates an operation's precondition."""


class FormatError(ValueError):
    """A file on disk does not match the expected binary or text layout."""


class ConfigError(ValueError):
    """A configuration section failed validation."""


class OptimizationError(RuntimeError):
    """The motion optimizer produced a non-finite loss."""
