"""
Exception hierarchy shared by every app.

Management commands map ConfigurationError to exit code 2 and every other
ConvexificationError to exit code 3.
"""

from typing import Optional


class ConvexificationError(Exception):
    """Base class for all errors raised by the toolkit."""


class ConfigurationError(ConvexificationError, ValueError):
    """Invalid parameters or a failed validation report."""


class NumericalError(ConvexificationError, ArithmeticError):
    """Non-finite values, overflow or loss of accuracy."""


class DivergenceError(NumericalError):
    """Gradient descent increased the functional too many times in a row."""


class DataError(ConvexificationError, ValueError):
    """Input data that cannot be processed (shape, sign, sampling)."""


class EmptyReconstructionError(DataError):
    """No node of a reconstruction exceeds the detection threshold."""


class StageError(ConvexificationError, RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str, cause: Optional[BaseException] = None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.cause = cause
