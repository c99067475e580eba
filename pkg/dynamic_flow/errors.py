"""Exception types raised by the dynamic flow engine."""
from __future__ import annotations

from typing import Optional


class DynamicFlowError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DynamicFlowError, ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ContractError(DynamicFlowError, ValueError):
    """Raised when a caller violates an operation's precondition."""


class EmptyMaskError(ContractError):
    """Raised when a validity mask selects no pixels."""


class NonFiniteError(DynamicFlowError, ArithmeticError):
    """Raised when a loss or gradient stops being finite."""

    def __init__(self, message: str, *, parameter: Optional[str] = None) -> None:
        super().__init__(message)
        self.parameter = parameter


class DatasetFormatError(DynamicFlowError, ValueError):
    """Raised when a dataset file cannot be decoded."""


class CheckpointFormatError(DynamicFlowError, ValueError):
    """Raised when a checkpoint file cannot be decoded."""


__all__ = [
    "CheckpointFormatError",
    "ContractError",
    "DatasetFormatError",
    "DynamicFlowError",
    "EmptyMaskError",
    "NonFiniteError",
    "ShapeError",
]
