"""Exception types shared across the package."""


class CtxGcnError(Exception):
    """Base class for package errors."""


class DimensionError(CtxGcnError, ValueError):
    """Operand shapes are incompatible."""


class ValidationError(CtxGcnError, ValueError):
    """Invalid argument, configuration or input file content."""


class FormatError(CtxGcnError, ValueError):
    """Malformed binary or JSON artifact."""


class NumericError(CtxGcnError, ArithmeticError):
    """Non-finite value encountered where finite math was required."""


class CoverageError(CtxGcnError, ValueError):
    """A tube overlaps none of the sampled clips."""
