"""Exception types shared across the package."""


class HardTspError(Exception):
    """Base class for all package errors."""


class InvalidInstanceError(HardTspError, ValueError):
    pass


class InvalidTourError(HardTspError, ValueError):
    pass


class DegenerateInstanceError(HardTspError, ValueError):
    """Raised when a point set has zero extent along some axis."""

    def __init__(self, dim, message=None):
        self.dim = dim
        super().__init__(message or f"zero coordinate range in dimension {dim}")


class SizeLimitError(HardTspError, ValueError):
    pass


class DomainError(HardTspError, ValueError):
    pass


class OracleViolationError(HardTspError):
    """A solver produced a cost below the claimed optimum."""


class ShapeError(HardTspError, ValueError):
    pass


class NumericError(HardTspError, FloatingPointError):
    def __init__(self, kind, message=None):
        self.kind = kind
        super().__init__(message or f"non-finite values produced by op '{kind}'")


class ContractError(HardTspError):
    pass


class AccountingError(HardTspError):
    """Gradients and parameters do not line up."""


class BatchShapeError(HardTspError, ValueError):
    pass


class BaselineError(HardTspError):
    pass


class ConfigError(HardTspError, ValueError):
    pass


class CheckpointError(HardTspError):
    pass


class CheckpointCompatibilityError(CheckpointError):
    pass


class FormatError(HardTspError, ValueError):
    """Malformed dataset, checkpoint, or metrics file."""


class SingularGradientWarning(UserWarning):
    """A zero-length tour edge has no defined direction."""
