"""Exceptions and warnings raised by the joint model."""


class JointModelError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(JointModelError, ValueError):
    """Input data, configuration or file contents failed validation."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IllConditionedKernelError(JointModelError):
    """Cholesky factorization failed even at the largest allowed jitter."""


class NumericalError(JointModelError):
    """An objective or gradient evaluated to a non-finite value."""


class ConvergenceWarning(RuntimeWarning):
    """The local optimizer stopped without reporting success."""
