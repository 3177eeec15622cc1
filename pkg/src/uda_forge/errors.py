"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation-type errors exit 1, numeric
aborts exit 2.
"""

from __future__ import annotations


class UdaForgeError(Exception):
    """Base class for all library errors."""


class ShapeError(UdaForgeError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(UdaForgeError, ValueError):
    """An input lies outside the domain of the operation (empty, zero-norm, ...)."""


class ConfigError(UdaForgeError, ValueError):
    """A configuration value is invalid."""


class FormatError(UdaForgeError, ValueError):
    """A binary file or registry does not match its documented layout."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ChecksumError(FormatError):
    """A residual was applied to a base model it was not extracted against."""


class NumericError(UdaForgeError, ArithmeticError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, term: str | None = None) -> None:
        self.term = term
        super().__init__(message)


class DivergenceError(NumericError):
    """Training aborted; carries the last finite metrics."""

    def __init__(self, message: str, term: str | None = None, last_metrics: dict | None = None) -> None:
        super().__init__(message, term)
        self.last_metrics = last_metrics or {}
