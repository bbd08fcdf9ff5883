"""Exception hierarchy shared by every module."""


class BijectaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(BijectaError, ValueError):
    """Shapes or axes that do not line up."""


class DomainError(BijectaError, ValueError):
    """Inputs outside the domain of an operation (log of <= 0, |u| >= 1/2, NaN knots)."""


class ContractError(BijectaError, RuntimeError):
    """An API was used out of order, e.g. backward on a non-scalar."""


class LinAlgError(BijectaError, ArithmeticError):
    """Singular or rank-deficient matrices."""


class TrainingError(BijectaError, RuntimeError):
    """Optimisation produced a non-finite value.

    ``step`` is the optimisation step index and ``trace`` the metric rows
    collected up to the failure.
    """

    def __init__(self, message, step=None, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = trace if trace is not None else []


class FormatError(BijectaError, ValueError):
    """Malformed binary file; ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(BijectaError, ValueError):
    """Invalid or unknown configuration keys/values."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
