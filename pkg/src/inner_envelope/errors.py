"""Exception and warning types shared across the package."""

from typing import Any, Dict, List, Optional


class InnerEnvelopeError(Exception):
    """Base error carrying a machine-readable code and a CLI exit code."""

    code = "UNKNOWN_ERROR"
    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        """
        Render the error the way the CLI reports it.

        Returns:
            Dict with 'code', 'message' and, when present, 'details'
        """
        error = {"code": self.code, "message": self.message}
        if self.details:
            error["details"] = self.details
        return error


class DataError(InnerEnvelopeError, ValueError):
    """Malformed or unusable input data."""

    code = "INVALID_INPUT"
    exit_code = 1


class DimensionError(InnerEnvelopeError, ValueError):
    """Dimension constraints violated (u, d, r - u - d, shapes)."""

    code = "INVALID_DIMENSIONS"
    exit_code = 2


class SingularBlockError(InnerEnvelopeError):
    """The top block of a basis is not invertible, so the chart does not apply."""

    code = "SINGULAR_BLOCK"
    exit_code = 1

    def __init__(self, message: str, permutation: List[int]):
        super().__init__(message, {"permutation": list(permutation)})
        self.permutation = list(permutation)


class EstimationError(InnerEnvelopeError):
    """An estimator could not produce a usable result."""

    code = "ESTIMATION_FAILED"
    exit_code = 1


class ConvergenceError(InnerEnvelopeError):
    """Raised by the CLI when a fit finished without converging."""

    code = "NOT_CONVERGED"
    exit_code = 3


class SmootherWarning(UserWarning):
    """Kernel smoother clamped a denominator or fell back to a nearest neighbour."""


class JitterWarning(UserWarning):
    """A covariance matrix needed ridge jitter to be inverted."""


class ConvergenceWarning(UserWarning):
    """An iterative solver stopped before meeting its tolerance."""


class SmallSampleWarning(UserWarning):
    """Fewer than ten observations per free parameter."""
