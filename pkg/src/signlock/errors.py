"""Exception types shared across the package.

Each class maps to one CLI exit code (see ``signlock.cli``).
"""

from __future__ import annotations


class SignlockError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SignlockError, ValueError):
    """Invalid parameters, configs, or shapes."""

    exit_code = 2


class FormatError(SignlockError, ValueError):
    """A file does not match the expected binary or JSON layout."""

    exit_code = 3


class NumericError(SignlockError, ArithmeticError):
    """A computation produced an undefined or non-finite result."""

    exit_code = 4


class DivergenceError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, message: str, step: int, partial=None):
        super().__init__(message)
        self.step = step
        self.partial = partial


class InfeasibleBudgetError(SignlockError, ValueError):
    """A bit budget cannot be met by any admissible plan."""

    exit_code = 5

    def __init__(self, message: str, minimum_bpw: float):
        super().__init__(message)
        self.minimum_bpw = minimum_bpw
