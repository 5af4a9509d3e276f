"""Flow layers: each is one diffeomorphism step.

Linear steps (fully connected, convolutional) carry forward parameters and
separately learned inverse parameters. The activation is an element-wise
strictly increasing map with an analytic log-determinant; squeezing is a
volume-preserving permutation.

All evaluation methods take batch-first arrays and are pure; parameters
are mutated only between steps, and every mutation must be followed by
``bump_version()`` so factorization caches stay honest.
"""

import numpy as np

from . import linalg
from .errors import NoConvergence


def flip_kernel(k):
    """Kernel transform whose convolution matrix is the transpose.

    Swaps the input/output channel axes and mirrors both spatial axes:
    flip(k)[o, i, h, w] = k[i, o, H-1-h, W-1-w]. Applying it twice returns
    the original kernel.
    """
    k = np.asarray(k)
    return k.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1].copy()


def compute_multiple_m(out_shape, in_shape, kernel_shape, pad=None):
    """Per-tap occurrence counts of a kernel inside its convolution matrix.

    Computed as the kernel-gradient correlation of an all-ones output with
    an all-ones input, run with the same convolution hyperparameters, so
    each count is the number of output positions whose receptive field
    keeps that tap in bounds.
    """
    ones_z = np.ones((1,) + tuple(out_shape))
    ones_x = np.ones((1,) + tuple(in_shape))
    return linalg.conv_backward_weight(ones_z, ones_x, kernel_shape, pad)


class FcLayer:
    """Square linear map z = W x with learned inverse x ~ R z."""

    param_names = ("W", "R")

    def __init__(self, W, R):
        self.W = np.ascontiguousarray(W, dtype=np.float64)
        self.R = np.ascontiguousarray(R, dtype=np.float64)
        if self.W.shape != self.R.shape or self.W.shape[0] != self.W.shape[1]:
            raise ValueError(f"need matching square W, R; got {self.W.shape}, {self.R.shape}")
        self.version = 0
        self._lu_cache = {}

    @classmethod
    def initialize(cls, dim, rng, gain=0.01, inverse_init="transpose"):
        """Identity plus Xavier-normal noise; R starts as W^T (or exact inverse)."""
        std = gain * np.sqrt(2.0 / (dim + dim))
        w = np.eye(dim) + rng.normal(0.0, std, size=(dim, dim))
        if inverse_init == "transpose":
            r = w.T.copy()
        elif inverse_init == "exact":
            r = linalg.inverse(linalg.lu_factor(w))
        else:
            raise ValueError(f"unknown inverse_init {inverse_init!r}")
        return cls(w, r)

    @property
    def dim(self):
        return self.W.shape[0]

    def bump_version(self):
        self.version += 1

    def params(self):
        return {"W": self.W, "R": self.R}

    def set_param(self, name, value):
        getattr(self, name)[...] = value
        self.bump_version()

    def _lu(self, name):
        entry = self._lu_cache.get(name)
        if entry is None or entry[0] != self.version:
            entry = (self.version, linalg.lu_factor(getattr(self, name)))
            self._lu_cache[name] = entry
        return entry[1]

    def out_shape(self, in_shape):
        if in_shape != (self.dim,):
            raise ValueError(f"layer of dim {self.dim} got input shape {in_shape}")
        return in_shape

    def forward(self, x):
        return x @ self.W.T

    def inverse_learned(self, z):
        return z @ self.R.T

    def inverse_exact(self, z):
        return linalg.solve(self._lu("W"), z.T).T

    def backward_delta(self, h_in, delta_out):
        # delta at input = W^T delta at output
        return delta_out @ self.W

    def g_forward(self, h):
        """Inverse-parameterized transform z = R^{-1} h (exact solve)."""
        return linalg.solve(self._lu("R"), h.T).T

    def g_backward_delta(self, delta_out):
        return linalg.solve(self._lu("R"), delta_out.T, transpose=True).T

    def logdet_theta(self, in_shape=None):
        """Data-independent log|det W|."""
        _, logabs = linalg.logabsdet(self._lu("W"))
        return logabs

    def logdet_gamma_inverse(self, in_shape=None):
        """Data-independent log|det R^{-1}| = -log|det R|."""
        _, logabs = linalg.logabsdet(self._lu("R"))
        return -logabs


class ConvLayer:
    """Channel-square convolution z = w * x with learned inverse kernel r.

    The inverse kernel may have a larger odd spatial extent than w. Exact
    inversion materializes the dense convolution matrix once per input
    shape and reuses its factorization.
    """

    param_names = ("w", "r")

    def __init__(self, w, r):
        self.w = np.ascontiguousarray(w, dtype=np.float64)
        self.r = np.ascontiguousarray(r, dtype=np.float64)
        if self.w.shape[0] != self.w.shape[1] or self.r.shape[0] != self.r.shape[1]:
            raise ValueError("channel counts must be square for invertibility")
        if self.w.shape[0] != self.r.shape[0]:
            raise ValueError(f"w and r disagree on channels: {self.w.shape} vs {self.r.shape}")
        if self.r.shape[2] < self.w.shape[2] or self.r.shape[3] < self.w.shape[3]:
            raise ValueError("inverse kernel must be at least as large as the forward kernel")
        self.version = 0
        self._lu_cache = {}
        self._m_cache = {}

    @classmethod
    def initialize(cls, channels, ksize, rng, gain=0.01, r_ksize=None):
        """Dirac-delta kernel plus Xavier-normal noise; r starts as flip(w)."""
        kh = kw = int(ksize)
        std = gain * np.sqrt(2.0 / (2 * channels * kh * kw))
        w = np.zeros((channels, channels, kh, kw))
        for c in range(channels):
            w[c, c, (kh - 1) // 2, (kw - 1) // 2] = 1.0
        w += rng.normal(0.0, std, size=w.shape)
        if r_ksize is None or int(r_ksize) == kh:
            r = flip_kernel(w)
        else:
            rk = int(r_ksize)
            if rk % 2 == 0 or rk < kh:
                raise ValueError("inverse kernel size must be odd and >= forward size")
            off = (rk - kh) // 2
            padded = np.zeros((channels, channels, rk, rk))
            padded[:, :, off : off + kh, off : off + kw] = w
            r = flip_kernel(padded)
        return cls(w, r)

    @property
    def channels(self):
        return self.w.shape[0]

    def bump_version(self):
        self.version += 1

    def params(self):
        return {"w": self.w, "r": self.r}

    def set_param(self, name, value):
        getattr(self, name)[...] = value
        self.bump_version()

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.channels:
            raise ValueError(f"conv of {self.channels} channels got input shape {in_shape}")
        return in_shape

    def forward(self, x):
        return linalg.conv2d_batch(x, self.w)

    def inverse_learned(self, z):
        return linalg.conv2d_batch(z, self.r)

    def _lu(self, name, in_shape):
        key = (name, tuple(in_shape))
        entry = self._lu_cache.get(key)
        if entry is None or entry[0] != self.version:
            t = linalg.build_conv_matrix(getattr(self, name), in_shape)
            entry = (self.version, linalg.lu_factor(t))
            self._lu_cache[key] = entry
        return entry[1]

    def inverse_exact(self, z):
        in_shape = z.shape[1:]
        f = self._lu("w", in_shape)
        flat = linalg.solve(f, z.reshape(z.shape[0], -1).T).T
        return flat.reshape(z.shape)

    def backward_delta(self, h_in, delta_out):
        # transpose convolution == convolution with the flipped kernel
        return linalg.conv2d_batch(delta_out, flip_kernel(self.w))

    def g_forward(self, h):
        in_shape = h.shape[1:]
        f = self._lu("r", in_shape)
        flat = linalg.solve(f, h.reshape(h.shape[0], -1).T).T
        return flat.reshape(h.shape)

    def g_backward_delta(self, delta_out):
        in_shape = delta_out.shape[1:]
        f = self._lu("r", in_shape)
        flat = linalg.solve(f, delta_out.reshape(delta_out.shape[0], -1).T, transpose=True).T
        return flat.reshape(delta_out.shape)

    def multiple_m(self, name, in_shape):
        """Occurrence counts for the named kernel at this input shape, cached."""
        kernel = getattr(self, name)
        key = (name, tuple(in_shape))
        if key not in self._m_cache:
            out_shape = (kernel.shape[0],) + tuple(in_shape[1:])
            self._m_cache[key] = compute_multiple_m(out_shape, in_shape, kernel.shape)
        return self._m_cache[key]

    def logdet_theta(self, in_shape):
        _, logabs = linalg.logabsdet(self._lu("w", in_shape))
        return logabs

    def logdet_gamma_inverse(self, in_shape):
        _, logabs = linalg.logabsdet(self._lu("r", in_shape))
        return -logabs


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    # overflow-safe: max(x, 0) + log1p(exp(-|x|))
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class SmoothLeakyRelu:
    """Element-wise map y = alpha*x + (1-alpha)*softplus(x).

    Strictly increasing for alpha in (0, 1], with derivative
    alpha + (1-alpha)*sigmoid(x) bounded away from zero, so the
    log-determinant is a cheap per-element sum and the inverse exists
    everywhere (found by safeguarded Newton iteration).
    """

    param_names = ()

    def __init__(self, alpha=0.3):
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        self.alpha = float(alpha)
        self.version = 0

    def params(self):
        return {}

    def bump_version(self):
        self.version += 1

    def out_shape(self, in_shape):
        return in_shape

    def value(self, x):
        return self.alpha * x + (1.0 - self.alpha) * _softplus(x)

    def derivative(self, x):
        return self.alpha + (1.0 - self.alpha) * _sigmoid(x)

    def second_derivative(self, x):
        s = _sigmoid(x)
        return (1.0 - self.alpha) * s * (1.0 - s)

    def forward(self, x):
        return self.value(x)

    def forward_with_logdet(self, x):
        """Returns (y, per-example sum of log derivative)."""
        y = self.value(x)
        ld = np.sum(np.log(self.derivative(x)).reshape(x.shape[0], -1), axis=1)
        return y, ld

    def backward_delta(self, h_in, delta_out):
        # chain rule through y plus the gradient of this layer's own
        # log-determinant term with respect to its input
        d = self.derivative(h_in)
        return d * delta_out + self.second_derivative(h_in) / d

    def inverse_learned(self, z):
        return self.inverse(z)

    def inverse_exact(self, z):
        return self.inverse(z)

    def inverse(self, y, tol=1e-10, max_iter=100):
        """Invert element-wise: Newton with a bisection safeguard."""
        y = np.asarray(y, dtype=np.float64)
        if self.alpha == 1.0:
            return y.copy()
        lo = np.minimum(y, y / self.alpha) - 1.0
        hi = np.maximum(y, y / self.alpha) + 1.0
        # widen until the root is bracketed (rarely needed)
        for _ in range(64):
            bad = self.value(lo) > y
            if not np.any(bad):
                break
            lo[bad] -= 2.0 * (hi[bad] - lo[bad])
        for _ in range(64):
            bad = self.value(hi) < y
            if not np.any(bad):
                break
            hi[bad] += 2.0 * (hi[bad] - lo[bad])
        x = np.where(y < 0, y / self.alpha, y)
        for _ in range(max_iter):
            fx = self.value(x) - y
            if np.max(np.abs(fx)) <= tol:
                return x
            lo = np.where(fx < 0, x, lo)
            hi = np.where(fx > 0, x, hi)
            x_new = x - fx / self.derivative(x)
            outside = (x_new < lo) | (x_new > hi)
            x = np.where(outside, 0.5 * (lo + hi), x_new)
        raise NoConvergence(f"activation inversion missed {tol:g} in {max_iter} steps")


class SqueezeLayer:
    """Trade spatial extent for channels: (C, H, W) -> (C*f^2, H/f, W/f).

    A pure index permutation, so the log-determinant contribution is
    exactly zero and the inverse is exact.
    """

    param_names = ()

    def __init__(self, factor=2):
        if factor < 1:
            raise ValueError("factor must be >= 1")
        self.factor = int(factor)
        self.version = 0

    def params(self):
        return {}

    def bump_version(self):
        self.version += 1

    def out_shape(self, in_shape):
        c, h, w = in_shape
        f = self.factor
        if h % f or w % f:
            raise ValueError(f"spatial dims {h}x{w} not divisible by {f}")
        return (c * f * f, h // f, w // f)

    def forward(self, x):
        b, c, h, w = x.shape
        f = self.factor
        v = x.reshape(b, c, h // f, f, w // f, f)
        return v.transpose(0, 1, 3, 5, 2, 4).reshape(b, c * f * f, h // f, w // f).copy()

    def inverse(self, z):
        b, cf, hh, ww = z.shape
        f = self.factor
        c = cf // (f * f)
        v = z.reshape(b, c, f, f, hh, ww)
        return v.transpose(0, 1, 4, 2, 5, 3).reshape(b, c, hh * f, ww * f).copy()

    def inverse_learned(self, z):
        return self.inverse(z)

    def inverse_exact(self, z):
        return self.inverse(z)

    def backward_delta(self, h_in, delta_out):
        return self.inverse(delta_out)


def is_linear(layer):
    return isinstance(layer, (FcLayer, ConvLayer))
