"""Self-normalizing flow density estimation.

Normalizing-flow layers carry paired forward and inverse parameters; the
inverse weights stand in for the inverse-Jacobian term of the
log-likelihood gradient, trained against an exact-gradient baseline with
amortized exact inference and gradient-angle/timing diagnostics.
"""

from . import data, diagnostics, gradients, layers, linalg, model, training
from .errors import (
    ChecksumError,
    DegenerateInput,
    DivergenceError,
    NoConvergence,
    SingularMatrix,
    SizeGuardExceeded,
    SnflowError,
    VersionMismatch,
)

__all__ = [
    "data",
    "diagnostics",
    "gradients",
    "layers",
    "linalg",
    "model",
    "training",
    "ChecksumError",
    "DegenerateInput",
    "DivergenceError",
    "NoConvergence",
    "SingularMatrix",
    "SizeGuardExceeded",
    "SnflowError",
    "VersionMismatch",
]
