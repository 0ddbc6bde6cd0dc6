"""Exception hierarchy shared by every module."""


class DvisError(Exception):
    """Base class for all package errors."""


class DimensionError(DvisError, ValueError):
    """Operand shapes are incompatible."""


class EmptyKeyError(DimensionError):
    """Attention was asked to attend over zero keys."""


class ConfigError(DvisError, ValueError):
    """A configuration value is invalid or inconsistent."""


class InfeasibleError(DvisError, ValueError):
    """No assignment avoids the forbidden (infinite-cost) pairs."""


class EvaluationError(DvisError, ArithmeticError):
    """A function produced a non-finite value where a finite one is required."""


class FormatError(DvisError, ValueError):
    """A binary file is malformed; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
