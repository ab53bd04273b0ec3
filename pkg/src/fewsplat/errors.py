"""Exception hierarchy shared across the package."""


class FewsplatError(Exception):
    """Base class for all package errors."""


class ValidationError(FewsplatError):
    """Bad input: missing files, malformed records, shape mismatches."""


class DegenerateParameterError(FewsplatError):
    """Non-finite or degenerate Gaussian parameters (e.g. zero quaternion)."""


class NonFiniteLossError(FewsplatError):
    """Training produced a non-finite loss; the run must abort."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class MismatchedIntermediatesError(FewsplatError):
    """Backward pass invoked with intermediates from a different forward pass."""
