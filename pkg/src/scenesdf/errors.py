"""Exception types mapped to CLI exit codes (0 ok, 2/3/4 below)."""


class ConfigError(Exception):
    """Invalid configuration or flags (exit code 2)."""

    exit_code = 2


class DataError(Exception):
    """Missing, malformed, or inconsistent input data (exit code 3)."""

    exit_code = 3


class NumericalAbort(Exception):
    """Non-finite loss or values encountered during training (exit code 4)."""

    exit_code = 4

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = dict(breakdown or {})
