"""Exception types shared across the package.

The CLI maps each class onto a fixed process exit code.
"""


class ParError(Exception):
    exit_code = 1


class ContractViolation(ParError, ValueError):
    """Caller broke a documented precondition (shape, divisibility, range)."""

    exit_code = 2


class ConfigError(ParError, ValueError):
    exit_code = 2


class NumericError(ParError, FloatingPointError):
    """A NaN/Inf showed up where finite values are required."""

    exit_code = 3


class VerificationError(ParError):
    exit_code = 4
