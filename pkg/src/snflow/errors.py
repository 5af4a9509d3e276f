"""Shared exception types."""


class SnflowError(Exception):
    """Base class for all package errors."""


class SingularMatrix(SnflowError):
    """A pivot collapsed during LU factorization; the map is not invertible."""


class SizeGuardExceeded(SnflowError):
    """A dense convolution matrix was requested above the materialization cap."""


class NoConvergence(SnflowError):
    """An iterative inversion failed to reach tolerance."""


class DegenerateInput(SnflowError):
    """An operation received input for which its result is undefined."""


class DivergenceError(SnflowError):
    """Training loss became non-finite or exceeded the divergence threshold."""

    def __init__(self, message, epoch=None, step=None, loss=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.loss = loss


class VersionMismatch(SnflowError):
    """A checkpoint was written by an incompatible format version."""


class ChecksumError(SnflowError):
    """A checkpoint payload failed its integrity check."""
