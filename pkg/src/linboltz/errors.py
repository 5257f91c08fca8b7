"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: configuration problems exit with
status 2, numerical failures with status 3.
"""

from __future__ import annotations


class LinBoltzError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LinBoltzError, ValueError):
    """Invalid or inconsistent input parameters."""


class ContractError(LinBoltzError, ValueError):
    """A documented precondition of an operation was violated."""


class OutOfRangeError(ConfigurationError):
    """A tabulated quantity was queried outside its table."""


class DegenerateError(ConfigurationError):
    """A configuration is mathematically degenerate (empty set, zero mass, ...)."""


class AssumptionViolation(LinBoltzError, ValueError):
    """A collision kernel violates a hard structural assumption (e.g. positivity)."""


class NumericError(LinBoltzError, ArithmeticError):
    """Non-finite values or a failed numerical procedure."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
