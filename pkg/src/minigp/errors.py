"""Exception types raised by the library.

Everything user-facing derives from :class:`MiniGpError` so callers can
catch broadly; the subclasses distinguish contract violations (bad shapes,
bad values) from numerical failures (factorization, solver breakdown).
"""


class MiniGpError(Exception):
    """Base class for all library errors."""


class DimensionMismatchError(MiniGpError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(MiniGpError, ValueError):
    """An input array contains NaN or infinite entries."""


class NonSquareError(MiniGpError, ValueError):
    """A square matrix was required."""


class NonSymmetricError(MiniGpError, ValueError):
    """A symmetric matrix was required."""


class NotPositiveDefiniteError(MiniGpError, RuntimeError):
    """Cholesky factorization failed even after diagonal jitter escalation."""

    def __init__(self, message, jitter_tried=0.0):
        super().__init__(message)
        self.jitter_tried = jitter_tried


class SingularTriangularError(MiniGpError, RuntimeError):
    """A triangular solve hit a zero diagonal entry."""


class OperatorNotSpdError(MiniGpError, RuntimeError):
    """An iterative solver detected that its operator is not positive definite."""


class KernelParseError(MiniGpError, ValueError):
    """A kernel expression string could not be parsed."""

    def __init__(self, message, token=None):
        super().__init__(message)
        self.token = token
