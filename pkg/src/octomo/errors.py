"""Exception hierarchy shared by all modules."""


class OctomoError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(OctomoError, ValueError):
    """Invalid configuration value or combination of values."""


class InputError(OctomoError, ValueError):
    """Caller passed data that violates an operation's preconditions."""


class NumericError(OctomoError, ArithmeticError):
    """Non-finite values appeared in a computation.

    ``stage`` names the pipeline stage where the problem was detected.
    """

    def __init__(self, message, stage=None):
        super().__init__(message if stage is None else f"[{stage}] {message}")
        self.stage = stage


class ConsistencyError(OctomoError, RuntimeError):
    """Internal invariant broken (e.g. a sample refers to a non-active node)."""


class FormatError(OctomoError, IOError):
    """File is corrupt, truncated, or has an unsupported version."""
