"""Dense float64 linear algebra kernel: matrix products, LU with partial
pivoting (log-determinants, solves, inverses), and 2-D convolution
primitives including an explicit convolution-matrix builder used as a
test oracle.

Tensors are plain numpy float64 arrays in C (row-major) order. Vectorized
images follow row-major flattening of (channels, height, width).
"""

import contextlib
from dataclasses import dataclass

import numpy as np

from ._lukernels import lu_inplace, lu_solve_mat
from .errors import SingularMatrix, SizeGuardExceeded


@contextlib.contextmanager
def single_thread(limit=1):
    """Pin BLAS thread pools for deterministic, cleanly scalable timing."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=int(limit)):
        yield

from ._lukernels import PIVOT_TOL  # pivots below this are exactly singular

# Largest flattened dimension for which a dense convolution matrix may be
# materialized. The builder is an oracle and an amortized-inference path,
# not a fast path.
CONV_MATRIX_MAX_DIM = 4096

_EYE_CACHE = {}


def identity(dim):
    """Shared read-only identity matrix (right-hand sides are copied by
    the solve kernels)."""
    if dim not in _EYE_CACHE:
        eye = np.eye(dim)
        eye.setflags(write=False)
        _EYE_CACHE[dim] = eye
    return _EYE_CACHE[dim]


# Instrumentation: number of LU factorizations performed since import or
# the last reset. Used to verify that amortized inference stops paying
# for factorizations.
_LU_CALLS = 0


def lu_call_count():
    return _LU_CALLS


def reset_lu_call_count():
    global _LU_CALLS
    _LU_CALLS = 0


def as_tensor(data):
    """Coerce to a float64 C-order array."""
    return np.ascontiguousarray(data, dtype=np.float64)


def matmul(a, b):
    """Matrix product with explicit shape validation.

    Summation order is the BLAS kernel's fixed order; single-threaded
    execution makes results reproducible run to run.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


@dataclass
class LuFactorization:
    """Packed LU factorization with partial pivoting.

    ``lu`` holds L (unit lower, below diagonal) and U (upper) packed in one
    D x D array; ``piv`` is the LAPACK row-swap sequence; ``sign`` is the
    permutation sign (+1 or -1).
    """

    lu: np.ndarray
    piv: np.ndarray
    sign: int

    @property
    def dim(self):
        return self.lu.shape[0]

    @property
    def perm(self):
        """Explicit row permutation p with A[p] == L @ U."""
        p = np.arange(self.dim)
        for i, j in enumerate(self.piv):
            p[i], p[j] = p[j], p[i]
        return p


def lu_factor(a):
    """LU-factorize a square matrix, raising on singular pivots."""
    global _LU_CALLS
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"lu_factor expects a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("lu_factor requires finite entries")
    lu = a.copy()
    piv, sign = lu_inplace(lu)
    _LU_CALLS += 1
    if sign == 0:
        raise SingularMatrix(f"pivot magnitude below {PIVOT_TOL:g}")
    return LuFactorization(lu=lu, piv=piv, sign=int(sign))


def logabsdet(f):
    """(sign, log|det|) from an LU factorization: product of pivots."""
    diag = np.diag(f.lu)
    sign = f.sign * (1 if np.count_nonzero(diag < 0) % 2 == 0 else -1)
    return sign, float(np.sum(np.log(np.abs(diag))))


def solve(f, b, transpose=False):
    """Solve A x = b (or A^T x = b) from the packed factorization."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != f.dim:
        raise ValueError(f"rhs has {b.shape[0]} rows, factorization is {f.dim}")
    rhs = np.ascontiguousarray(b.reshape(f.dim, -1))
    x = lu_solve_mat(f.lu, f.piv, rhs, transpose)
    return x.reshape(b.shape)


def inverse(f):
    """Explicit inverse via solves against the identity."""
    return solve(f, identity(f.dim))


def _same_pad(kernel_shape):
    kh, kw = kernel_shape[-2], kernel_shape[-1]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"even kernel extents are not supported: {kh}x{kw}")
    return (kh - 1) // 2, (kw - 1) // 2


def _check_pad(kernel_shape, pad):
    same = _same_pad(kernel_shape)
    if pad is None:
        return same
    pad = (int(pad[0]), int(pad[1])) if not np.isscalar(pad) else (int(pad), int(pad))
    if pad != same:
        raise ValueError(f"padding {pad} does not preserve spatial size; need {same}")
    return pad


def _patch_view(x, kh, kw, pad):
    """Sliding kernel-sized windows of a zero-padded batch (B,C,H,W)."""
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v  # (B, C, H, W, kh, kw)


def conv2d_batch(x, kernel, pad=None):
    """Batched stride-1 cross-correlation with same-size zero padding.

    x: (B, C_in, H, W); kernel: (C_out, C_in, kH, kW) -> (B, C_out, H, W).
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"expected 4-D input and kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {kernel.shape[1]}")
    pad = _check_pad(kernel.shape, pad)
    b, _, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    v = _patch_view(x, kh, kw, pad)
    cols = v.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, ci * kh * kw)
    out = cols @ kernel.reshape(co, ci * kh * kw).T
    return out.reshape(b, h, w, co).transpose(0, 3, 1, 2).copy()


def conv2d(x, kernel, pad=None):
    """Single-example convolution: (C_in, H, W) -> (C_out, H, W).

    Cross-correlation convention: out[o, y, x] =
    sum_{c, dy, dx} kernel[o, c, dy, dx] * x[c, y + dy - pad_h, x + dx - pad_w],
    out-of-range input treated as zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (C, H, W) input, got {x.shape}")
    return conv2d_batch(x[None], kernel, pad)[0]


def conv_backward_weight(delta, x, kernel_shape, pad=None):
    """Kernel-gradient correlation: the delta (*) input operation.

    delta: (B, C_out, H, W); x: (B, C_in, H, W) -> (C_out, C_in, kH, kW),
    summed over the batch. Runs the main convolution's padding, so it is
    also the ones-by-ones route to the per-tap occurrence counts.
    """
    delta = np.asarray(delta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    kh, kw = int(kernel_shape[-2]), int(kernel_shape[-1])
    pad = _check_pad((0, 0, kh, kw), pad)
    b, co, h, w = delta.shape
    ci = x.shape[1]
    v = _patch_view(x, kh, kw, pad)
    cols = v.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, ci * kh * kw)
    d = delta.transpose(1, 0, 2, 3).reshape(co, b * h * w)
    return (d @ cols).reshape(co, ci, kh, kw)


def conv_output_dim(kernel_shape, in_shape):
    c_out = kernel_shape[0]
    return c_out * in_shape[1] * in_shape[2]


def build_conv_matrix(kernel, in_shape, pad=None):
    """Materialize the dense matrix M with M @ vec(x) == vec(conv2d(x)).

    Built column by column by convolving basis vectors, so M agrees with
    conv2d by construction. Oracle and amortization path only; guarded by
    CONV_MATRIX_MAX_DIM.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    ci, h, w = in_shape
    if kernel.shape[1] != ci:
        raise ValueError(f"kernel expects {kernel.shape[1]} channels, input has {ci}")
    d_in = ci * h * w
    d_out = conv_output_dim(kernel.shape, in_shape)
    if max(d_in, d_out) > CONV_MATRIX_MAX_DIM:
        raise SizeGuardExceeded(
            f"conv matrix {d_out}x{d_in} exceeds cap {CONV_MATRIX_MAX_DIM}"
        )
    pad = _check_pad(kernel.shape, pad)
    m = np.zeros((d_out, d_in))
    basis = np.zeros(d_in)
    for j in range(d_in):
        basis[j] = 1.0
        m[:, j] = conv2d(basis.reshape(ci, h, w), kernel, pad).ravel()
        basis[j] = 0.0
    return m
