"""Flow composition, the mixture objective, amortized exact inference,
pixel preprocessing with log-determinant accounting, and sampling.

Log-likelihoods accumulate per-layer log-determinants: linear layers
contribute data-independent values (LU factorizations, amortizable),
activations contribute analytic per-example values, squeezes contribute
zero.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import gradients, linalg
from .layers import is_linear

LOG_2PI = math.log(2.0 * math.pi)


def base_logprob(z):
    """Standard Gaussian log-density per example: -||z||^2/2 - (D/2)log(2pi)."""
    flat = z.reshape(z.shape[0], -1)
    d = flat.shape[1]
    return -0.5 * np.einsum("bi,bi->b", flat, flat) - 0.5 * d * LOG_2PI


def flow_forward_logdets(layers, x, cached_linear=None):
    """Walk the forward direction collecting per-layer log-determinants.

    Returns (z, per_layer) where per_layer holds scalars for linear and
    squeeze layers and per-example arrays for activations. cached_linear
    optionally maps layer index to a precomputed scalar.
    """
    h = x
    per_layer = []
    for idx, layer in enumerate(layers):
        if is_linear(layer):
            if cached_linear is not None and idx in cached_linear:
                per_layer.append(cached_linear[idx])
            else:
                per_layer.append(layer.logdet_theta(h.shape[1:]))
            h = layer.forward(h)
        elif hasattr(layer, "forward_with_logdet"):
            h, ld = layer.forward_with_logdet(h)
            per_layer.append(ld)
        else:
            h = layer.forward(h)
            per_layer.append(0.0)
    return h, per_layer


def flow_log_prob(layers, x, cached_linear=None):
    """Per-example log-density under the forward parameterization."""
    z, per_layer = flow_forward_logdets(layers, x, cached_linear)
    total = base_logprob(z)
    for ld in per_layer:
        total = total + ld
    return total


def flow_log_prob_g(layers, x, cached_linear=None):
    """Per-example log-density under the inverse parameterization: linear
    layers apply the exact inverse of their learned inverse weights and
    contribute -log|det gamma|."""
    h = x
    total_ld = 0.0
    for idx, layer in enumerate(layers):
        if is_linear(layer):
            if cached_linear is not None and idx in cached_linear:
                total_ld = total_ld + cached_linear[idx]
            else:
                total_ld = total_ld + layer.logdet_gamma_inverse(h.shape[1:])
            h = layer.g_forward(h)
        elif hasattr(layer, "forward_with_logdet"):
            h, ld = layer.forward_with_logdet(h)
            total_ld = total_ld + ld
        else:
            h = layer.forward(h)
    return base_logprob(h) + total_ld


@dataclass
class LogProbParts:
    base_logprob: np.ndarray
    total_logdet: np.ndarray

    @property
    def log_prob(self):
        return self.base_logprob + self.total_logdet


class FlowModel:
    """Ordered layer composition over a standard Gaussian base.

    Owns the reconstruction weight and the amortized cache of
    data-independent log-determinants, which is invalidated by layer
    parameter versions.
    """

    def __init__(self, layers, in_shape, lam=1.0):
        self.layers = list(layers)
        self.in_shape = tuple(in_shape)
        self.lam = float(lam)
        shape = self.in_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        self.out_shape = shape
        self.dim = int(np.prod(self.in_shape))
        self._cache = None
        self._cache_versions = None
        self.cache_hits = 0

    def _versions(self):
        return tuple(layer.version for layer in self.layers)

    def _layer_shapes(self):
        shapes = []
        shape = self.in_shape
        for layer in self.layers:
            shapes.append(shape)
            shape = layer.out_shape(shape)
        return shapes

    def cache_fresh(self):
        return self._cache is not None and self._cache_versions == self._versions()

    def amortize_logdets(self):
        """Compute every data-independent log-determinant once.

        Subsequent inference with unchanged parameters performs no LU
        factorization. A repeated call with fresh cache is a no-op and
        counts as a hit.
        """
        if self.cache_fresh():
            self.cache_hits += 1
            return self._cache
        theta = {}
        gamma = {}
        for idx, (layer, shape) in enumerate(zip(self.layers, self._layer_shapes())):
            if is_linear(layer):
                theta[idx] = layer.logdet_theta(shape)
                gamma[idx] = layer.logdet_gamma_inverse(shape)
        self._cache = {"theta": theta, "gamma": gamma}
        self._cache_versions = self._versions()
        return self._cache

    def log_prob_forward(self, x, use_cache=True):
        """Exact per-example log-density split into base and log-det parts.

        With use_cache (default) the data-independent terms come from the
        amortized cache, rebuilt first if parameters changed.
        """
        cached = self.amortize_logdets()["theta"] if use_cache else None
        z, per_layer = flow_forward_logdets(self.layers, x, cached)
        base = base_logprob(z)
        total_ld = np.zeros(x.shape[0])
        for ld in per_layer:
            total_ld = total_ld + ld
        return LogProbParts(base_logprob=base, total_logdet=total_ld), per_layer

    def log_prob_g(self, x, use_cache=True):
        cached = self.amortize_logdets()["gamma"] if use_cache else None
        return flow_log_prob_g(self.layers, x, cached)

    def recon_losses(self, x):
        """Per-linear-layer mean reconstruction penalty along the forward pass."""
        losses = {}
        h = x
        for idx, layer in enumerate(self.layers):
            if is_linear(layer):
                losses[idx] = float(np.mean(gradients.recon_loss(layer, h)))
            h = layer.forward(h)
        return losses

    def mixture_objective(self, x, use_cache=True):
        """(mean mixture objective, total mean reconstruction loss).

        Evaluation path: both densities are computed exactly, the inverse
        parameterization through LU solves of the learned inverse weights.
        """
        lp_f = self.log_prob_forward(x, use_cache)[0].log_prob
        lp_g = self.log_prob_g(x, use_cache)
        recon_total = 0.0
        for v in self.recon_losses(x).values():
            recon_total += v
        loss = float(np.mean(0.5 * lp_f + 0.5 * lp_g)) - self.lam * recon_total
        return loss, recon_total

    def nll(self, x, use_cache=True):
        """Mean negative log-likelihood in nats under the forward model."""
        parts, _ = self.log_prob_forward(x, use_cache)
        return float(-np.mean(parts.log_prob))

    def gradients(self, x, mode, strict_conv=False):
        return gradients.model_gradients(self.layers, x, mode, strict_conv)

    def sample(self, n, mode="learned_inverse", seed=0):
        """Draw base samples and push them through the inverse.

        'learned_inverse' applies the learned inverse weights;
        'exact_inverse' solves each linear layer with LU. Activations are
        inverted iteratively in both modes.
        """
        if mode not in ("learned_inverse", "exact_inverse"):
            raise ValueError(f"unknown sampling mode {mode!r}")
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n,) + self.out_shape)
        for layer in reversed(self.layers):
            if mode == "learned_inverse":
                z = layer.inverse_learned(z)
            else:
                z = layer.inverse_exact(z)
        return z


# ---------------------------------------------------------------------------
# topology descriptors
# ---------------------------------------------------------------------------


def describe_layers(layers):
    """Compact token per layer, enough to rebuild shapes (not values)."""
    from .layers import ConvLayer, FcLayer, SmoothLeakyRelu, SqueezeLayer

    tokens = []
    for layer in layers:
        if isinstance(layer, FcLayer):
            tokens.append(f"fc:{layer.dim}")
        elif isinstance(layer, ConvLayer):
            tokens.append(
                f"conv:{layer.channels}:{layer.w.shape[2]}:{layer.r.shape[2]}"
            )
        elif isinstance(layer, SmoothLeakyRelu):
            tokens.append(f"slrelu:{layer.alpha!r}")
        elif isinstance(layer, SqueezeLayer):
            tokens.append(f"squeeze:{layer.factor}")
        else:
            raise TypeError(f"cannot describe {type(layer).__name__}")
    return tokens


def build_layers(tokens):
    """Rebuild zero-initialized layers from describe_layers tokens;
    parameter values are filled in afterwards (e.g. from a checkpoint)."""
    from .layers import ConvLayer, FcLayer, SmoothLeakyRelu, SqueezeLayer

    layers = []
    for token in tokens:
        parts = token.split(":")
        kind = parts[0]
        if kind == "fc":
            dim = int(parts[1])
            layers.append(FcLayer(np.eye(dim), np.eye(dim)))
        elif kind == "conv":
            c, k, rk = int(parts[1]), int(parts[2]), int(parts[3])
            layers.append(
                ConvLayer(np.zeros((c, c, k, k)), np.zeros((c, c, rk, rk)))
            )
        elif kind == "slrelu":
            layers.append(SmoothLeakyRelu(float(parts[1])))
        elif kind == "squeeze":
            layers.append(SqueezeLayer(int(parts[1])))
        else:
            raise ValueError(f"unknown layer token {token!r}")
    return layers


# ---------------------------------------------------------------------------
# pixel preprocessing
# ---------------------------------------------------------------------------


@dataclass
class PreprocessSpec:
    """Dequantize, normalize, and logit-transform pixel data.

    v = pixel + u with u ~ U[0,1) (u = 0 when dequantization is off),
    y = v * scale, y' = shrink + (1 - 2*shrink) * y, x = logit(y').
    The shrink must be positive when dequantization is off, otherwise
    pixel 0 maps to an infinite logit.
    """

    dequantize: bool = True
    scale: float = 1.0 / 256.0
    shrink: float = 1e-6
    seed: int = 0


def preprocess(spec, pixels, rng=None):
    """Map raw pixels to logit space.

    Returns (x, logdet_contrib) with logdet_contrib the per-example log
    Jacobian determinant of the whole chain; reported likelihoods must
    include it.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    u = rng.random(pixels.shape) if spec.dequantize else 0.0
    v = pixels + u
    y = v * spec.scale
    yp = spec.shrink + (1.0 - 2.0 * spec.shrink) * y
    x = np.log(yp) - np.log1p(-yp)
    per_elem = (
        math.log1p(-2.0 * spec.shrink) + math.log(spec.scale)
        - np.log(yp) - np.log1p(-yp)
    )
    logdet = np.sum(per_elem.reshape(pixels.shape[0], -1), axis=1)
    return x, logdet


def deprocess(spec, x):
    """Invert the preprocessing chain back to the continuous
    (dequantized) pixel representation."""
    x = np.asarray(x, dtype=np.float64)
    yp = 1.0 / (1.0 + np.exp(-x))
    y = (yp - spec.shrink) / (1.0 - 2.0 * spec.shrink)
    return y / spec.scale
