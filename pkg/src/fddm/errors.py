"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FDDMError(Exception):
    """Base class for all package errors."""


class ParameterError(FDDMError, ValueError):
    """An argument is outside its valid range (e.g. tau <= 0)."""


class InputError(FDDMError, ValueError):
    """Non-finite or otherwise invalid numeric input."""


class ShapeError(FDDMError, ValueError):
    """Array shapes are inconsistent."""


class DomainError(FDDMError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class DegenerateVectorError(FDDMError, ValueError):
    """A vector has (near) zero norm where a direction is required."""


class ConfigError(FDDMError, ValueError):
    """Invalid configuration."""


class CapabilityError(FDDMError, TypeError):
    """The model lacks a component required by the call (e.g. a projector)."""


class DataError(FDDMError, ValueError):
    """Dataset contents violate the expected schema or contract."""


class ParseError(DataError):
    """A dataset file line could not be parsed."""

    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(ParseError):
    """A parsed record does not match the dataset header."""


class SplitError(DataError):
    """A dataset cannot be split as requested."""


class TrainingError(FDDMError, RuntimeError):
    """Training diverged or received non-finite gradients."""

    def __init__(self, message: str, step: int | None = None) -> None:
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class UndefinedMetricError(FDDMError, ValueError):
    """A metric is undefined for the given truth (e.g. AP without positives)."""
