"""Exception hierarchy shared by the package and mapped to CLI exit codes."""


class XsepError(Exception):
    """Base class for all package errors."""


class ShapeError(XsepError, ValueError):
    """Raised when an op receives incompatible shapes."""


class NumericalError(XsepError, ArithmeticError):
    """NaN/Inf produced, failed gradient check, or diverged training."""


class GraphError(XsepError, RuntimeError):
    """Misuse of the computation graph (non-scalar root, backward before forward)."""


class DataError(XsepError):
    """Malformed files, bad manifests, invalid dataset requests."""


class CheckpointError(DataError):
    """Unreadable or incompatible checkpoint file."""
