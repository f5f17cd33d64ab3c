"""Exception hierarchy shared by all rule miner components."""

from typing import Optional


class RuleMinerError(Exception):
    """Base class for all rule miner errors."""


class ShapeError(RuleMinerError, ValueError):
    """Tensor or parameter dimensions do not agree."""


class ConfigError(RuleMinerError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class UsageError(RuleMinerError, ValueError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class InputError(RuleMinerError, ValueError):
    """Input data is empty or violates a precondition."""


class ParseError(InputError):
    """A CMAPSS-format line could not be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ValidationError(InputError):
    """Parsed records violate a structural invariant."""


class NumericError(RuleMinerError, ArithmeticError):
    """A computation produced a non-finite value."""


class UndefinedMetricError(NumericError):
    """A statistic is undefined for the given input (e.g. confidence at zero support)."""
