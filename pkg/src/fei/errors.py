"""Exception types; each maps to a CLI exit code."""


class FeiError(Exception):
    exit_code = 1


class ConfigError(FeiError, ValueError):
    """Invalid configuration or hyperparameter."""

    exit_code = 1


class InvalidInputError(FeiError, ValueError):
    """Input data with the wrong shape, length or values."""

    exit_code = 2


class DataError(FeiError):
    """Dataset file missing or malformed."""

    exit_code = 2


class CheckpointError(FeiError):
    """Checkpoint unreadable, corrupted, or incompatible with the data."""

    exit_code = 2


class NumericalError(FeiError, ArithmeticError):
    """Non-finite loss or other numerical failure during training."""

    exit_code = 3
