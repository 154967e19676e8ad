"""
ABMT Exceptions - Error hierarchy shared by every module.

Everything raised on purpose by the package derives from ``ABMTError`` so callers
(and the command line) can catch the whole family at once.
"""


class ABMTError(Exception):
    """Base class for all ABMT errors."""


class DimensionError(ABMTError, ValueError):
    """Raised when tensor or matrix shapes do not line up."""


class ContractError(ABMTError, ValueError):
    """Raised when a caller violates an operation's precondition."""


class ParameterError(ABMTError, ValueError):
    """Raised for invalid hyperparameters, counts or ranges."""


class StateError(ABMTError, RuntimeError):
    """Raised when an object is used in a state that does not allow it."""


class NumericalError(ABMTError, FloatingPointError):
    """Raised when an operation would produce NaN or Inf."""


class DegenerateClusteringError(ABMTError):
    """Raised when clustering yields fewer than two usable clusters."""


class BatchError(ABMTError):
    """Raised when a PK batch cannot be drawn from the available labels."""


class EvaluationError(ABMTError):
    """Raised when retrieval evaluation has nothing valid to score."""
