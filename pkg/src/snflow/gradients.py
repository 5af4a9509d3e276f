"""Gradient engines for the mixture objective.

Two routes per layer: exact gradients that pay for LU inverses of the
forward and inverse maps, and self-normalizing (snf) gradients that
substitute the learned inverse weights for the inverse-transpose terms,
costing only matrix products. Reconstruction gradients are shared by both
routes. All objective terms are batch means; per-parameter results are
reported in components (loglik, logdet, recon) so diagnostics can compare
routes term by term.
"""

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .layers import ConvLayer, FcLayer, flip_kernel, is_linear

_TAP_MAP_CACHE = {}


@dataclass
class LayerCache:
    layer: object
    h_in: np.ndarray
    z_out: np.ndarray
    delta_z: np.ndarray = None
    delta_x: np.ndarray = None


@dataclass
class BackpropState:
    """Forward activations and backpropagated log-density errors."""

    caches: list
    z_final: np.ndarray


@dataclass
class GradComponents:
    """Per-parameter gradient split by objective term.

    total = 0.5*loglik + 0.5*logdet - lam*recon, accumulated in that fixed
    order.
    """

    loglik: np.ndarray
    logdet: np.ndarray
    recon: np.ndarray

    def total(self, lam):
        t = 0.5 * self.loglik
        t = t + 0.5 * self.logdet
        t = t - lam * self.recon
        return t


@dataclass
class GradReport:
    """Gradients for one batch: layer index -> param name -> components.

    The whole-model engine also attaches the batch's backprop state(s),
    per-layer mean reconstruction values, and (exact mode) the
    log-determinant values that fall out of the LU work, for monitoring.
    """

    mode: str
    layers: dict = field(default_factory=dict)
    recon_values: dict = field(default_factory=dict)
    logdet_values: dict = field(default_factory=dict)
    f_state: BackpropState = None
    g_state: BackpropState = None

    def totals(self, lam):
        """Ordered {(layer_index, param_name): total gradient}."""
        out = {}
        for idx in sorted(self.layers):
            for name, comps in self.layers[idx].items():
                out[(idx, name)] = comps.total(lam)
        return out


def forward_backward(layers, x):
    """Forward pass through the parameterized direction, then the delta
    chain of the induced log-density (base term plus every activation's
    own log-determinant term) back to the input."""
    h = x
    caches = []
    for layer in layers:
        cache = LayerCache(layer=layer, h_in=h, z_out=None)
        h = layer.forward(h)
        cache.z_out = h
        caches.append(cache)
    delta = -h  # standard Gaussian base: d log p_Z(z) / dz = -z
    for cache in reversed(caches):
        cache.delta_z = delta
        cache.delta_x = cache.layer.backward_delta(cache.h_in, delta)
        delta = cache.delta_x
    return BackpropState(caches=caches, z_final=h)


def g_forward_backward(layers, x):
    """The same walk through the inverse-parameterized direction: linear
    layers apply the exact inverse of their learned inverse weights."""
    h = x
    caches = []
    for layer in layers:
        cache = LayerCache(layer=layer, h_in=h, z_out=None)
        h = layer.g_forward(h) if is_linear(layer) else layer.forward(h)
        cache.z_out = h
        caches.append(cache)
    delta = -h
    for cache in reversed(caches):
        cache.delta_z = delta
        if is_linear(cache.layer):
            cache.delta_x = cache.layer.g_backward_delta(delta)
        else:
            cache.delta_x = cache.layer.backward_delta(cache.h_in, delta)
        delta = cache.delta_x
    return BackpropState(caches=caches, z_final=h)


# ---------------------------------------------------------------------------
# reconstruction penalty
# ---------------------------------------------------------------------------


def recon_loss(layer, h):
    """Per-example squared reconstruction residual of one layer.

    h is the layer input with gradients stopped: only this layer's
    parameters receive gradients from its penalty term.
    """
    if isinstance(layer, FcLayer):
        q = (h @ layer.W.T) @ layer.R.T - h
    elif isinstance(layer, ConvLayer):
        q = linalg.conv2d_batch(linalg.conv2d_batch(h, layer.w), layer.r) - h
    else:
        raise TypeError(f"no reconstruction penalty for {type(layer).__name__}")
    return np.sum(q.reshape(q.shape[0], -1) ** 2, axis=1)


def _fc_recon(layer, h, z=None):
    b = h.shape[0]
    if z is None:
        z = h @ layer.W.T
    q = z @ layer.R.T - h
    loss = np.einsum("bi,bi->b", q, q)
    dw = 2.0 * (q @ layer.R).T @ h / b
    dr = 2.0 * q.T @ z / b
    return loss, dw, dr


def fc_recon_grads(layer, h):
    """Batch-mean gradients of the reconstruction penalty (weight applied
    by the caller): dW = 2 R^T (RWh - h) h^T, dR = 2 (RWh - h) (Wh)^T."""
    _, dw, dr = _fc_recon(layer, h)
    return dw, dr


def _conv_recon(layer, h, z=None):
    b = h.shape[0]
    if z is None:
        z = linalg.conv2d_batch(h, layer.w)
    q = linalg.conv2d_batch(z, layer.r) - h
    loss = np.sum(q.reshape(b, -1) ** 2, axis=1)
    u = linalg.conv2d_batch(q, flip_kernel(layer.r))
    dw = 2.0 * linalg.conv_backward_weight(u, h, layer.w.shape) / b
    dr = 2.0 * linalg.conv_backward_weight(q, z, layer.r.shape) / b
    return loss, dw, dr


def conv_recon_grads(layer, h):
    """Convolutional analogue of fc_recon_grads, via backprop through the
    two convolutions."""
    _, dw, dr = _conv_recon(layer, h)
    return dw, dr


# ---------------------------------------------------------------------------
# fully connected layers
# ---------------------------------------------------------------------------


def fc_exact_grads(layer, h, delta_zf, delta_zg=None, z_g=None, recon_grads=None):
    """Exact gradients of the mixture terms for one fully connected layer.

    Inverse-transpose terms come from LU solves against W and R. The
    inverse-direction delta is computed by a genuine pass through R^{-1}
    when not supplied (single-layer case with a Gaussian base).
    """
    b = h.shape[0]
    if z_g is None:
        z_g = layer.g_forward(h)
    if delta_zg is None:
        delta_zg = -z_g
    w_inv_t = linalg.solve(layer._lu("W"), linalg.identity(layer.dim), transpose=True)
    r_inv_t = linalg.solve(layer._lu("R"), linalg.identity(layer.dim), transpose=True)
    dw_recon, dr_recon = recon_grads if recon_grads is not None else fc_recon_grads(layer, h)
    comps_w = GradComponents(
        loglik=delta_zf.T @ h / b, logdet=w_inv_t, recon=dw_recon
    )
    comps_r = GradComponents(
        loglik=-r_inv_t @ (delta_zg.T @ z_g / b), logdet=-r_inv_t, recon=dr_recon
    )
    return {"W": comps_w, "R": comps_r}


def fc_snf_grads(layer, h, delta_zf, delta_xf, recon_grads=None, z=None):
    """Self-normalizing gradients: R^T stands in for W^{-T} and W^T for
    R^{-T}; the forward deltas stand in for the inverse-direction deltas.
    No matrix is inverted."""
    b = h.shape[0]
    if z is None:
        z = h @ layer.W.T
    dw_recon, dr_recon = recon_grads if recon_grads is not None else fc_recon_grads(layer, h)
    comps_w = GradComponents(
        loglik=delta_zf.T @ h / b, logdet=layer.R.T.copy(), recon=dw_recon
    )
    comps_r = GradComponents(
        loglik=-delta_xf.T @ z / b, logdet=-layer.W.T.copy(), recon=dr_recon
    )
    return {"W": comps_w, "R": comps_r}


# ---------------------------------------------------------------------------
# convolutional layers
# ---------------------------------------------------------------------------


def _tap_positions(kernel_shape, in_shape):
    """Row/column positions of every kernel tap inside the conv matrix.

    Each matrix entry is touched by at most one tap, so probing with a
    distinct code per tap recovers the full sharing pattern in one build.
    """
    key = (tuple(kernel_shape), tuple(in_shape))
    if key not in _TAP_MAP_CACHE:
        n = int(np.prod(kernel_shape))
        code = np.arange(1.0, n + 1.0).reshape(kernel_shape)
        t = linalg.build_conv_matrix(code, in_shape)
        rows, cols = np.nonzero(t)
        taps = t[rows, cols].astype(np.int64) - 1
        _TAP_MAP_CACHE[key] = [
            (rows[taps == i], cols[taps == i]) for i in range(n)
        ]
    return _TAP_MAP_CACHE[key]


def project_matrix_to_kernel(mat, kernel_shape, in_shape):
    """Pull a dense matrix back onto kernel coordinates: each tap gets the
    sum of the matrix entries at its positions.

    For a matrix that itself is a convolution matrix T(p), this yields
    m * p elementwise, with m the per-tap occurrence count.
    """
    positions = _tap_positions(kernel_shape, in_shape)
    out = np.empty(int(np.prod(kernel_shape)))
    for i, (rows, cols) in enumerate(positions):
        out[i] = mat[rows, cols].sum()
    return out.reshape(kernel_shape)


def crop_kernel_center(r, target_hw):
    """Central spatial window of a kernel (both extents odd)."""
    kh, kw = target_hw
    rh, rw = r.shape[2], r.shape[3]
    if rh < kh or rw < kw:
        raise ValueError(f"cannot crop {rh}x{rw} kernel to {kh}x{kw}")
    if rh % 2 == 0 or kh % 2 == 0 or rw % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel extents must be odd")
    oy, ox = (rh - kh) // 2, (rw - kw) // 2
    return r[:, :, oy : oy + kh, ox : ox + kw].copy()


def pad_kernel_center(w, target_hw):
    """Zero-pad a kernel to a larger odd spatial extent, centered."""
    kh, kw = target_hw
    wh, ww = w.shape[2], w.shape[3]
    if wh > kh or ww > kw:
        raise ValueError(f"cannot pad {wh}x{ww} kernel to {kh}x{kw}")
    if wh % 2 == 0 or kh % 2 == 0 or ww % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel extents must be odd")
    oy, ox = (kh - wh) // 2, (kw - ww) // 2
    out = np.zeros(w.shape[:2] + (kh, kw))
    out[:, :, oy : oy + wh, ox : ox + ww] = w
    return out


def conv_exact_grad(layer, h, delta_zf, strict=False, delta_zg=None, z_g=None, recon_grads=None):
    """Exact gradients for one convolutional layer via its materialized
    convolution matrices.

    The forward-kernel log-determinant term projects T(w)^{-T} back onto
    the taps. The inverse-kernel term does the same with T(r)^{-T} and, by
    default, reuses the forward delta in its data term; with strict=True
    the delta is propagated through the true inverse direction.
    """
    b = h.shape[0]
    in_shape = h.shape[1:]
    if z_g is None:
        z_g = layer.g_forward(h)
    if strict:
        if delta_zg is None:
            delta_zg = -z_g
        delta_used = delta_zg
    else:
        delta_used = delta_zf
    w_inv_t = linalg.inverse(layer._lu("w", in_shape)).T
    r_inv_t = linalg.inverse(layer._lu("r", in_shape)).T
    u = layer.g_backward_delta(delta_used)
    dw_recon, dr_recon = recon_grads if recon_grads is not None else conv_recon_grads(layer, h)
    comps_w = GradComponents(
        loglik=linalg.conv_backward_weight(delta_zf, h, layer.w.shape) / b,
        logdet=project_matrix_to_kernel(w_inv_t, layer.w.shape, in_shape),
        recon=dw_recon,
    )
    comps_r = GradComponents(
        loglik=-linalg.conv_backward_weight(u, z_g, layer.r.shape) / b,
        logdet=-project_matrix_to_kernel(r_inv_t, layer.r.shape, in_shape),
        recon=dr_recon,
    )
    return {"w": comps_w, "r": comps_r}


def conv_snf_grads(layer, h, delta_zf, delta_xf, recon_grads=None, z=None):
    """Self-normalizing gradients for one convolutional layer: flipped
    opposite kernels scaled by per-tap occurrence counts stand in for the
    inverse-transpose projections. Asymmetric kernel sizes are reconciled
    by central cropping/padding."""
    b = h.shape[0]
    in_shape = h.shape[1:]
    if z is None:
        z = linalg.conv2d_batch(h, layer.w)
    m_w = layer.multiple_m("w", in_shape)
    m_r = layer.multiple_m("r", in_shape)
    r_as_w = crop_kernel_center(layer.r, layer.w.shape[2:])
    w_as_r = pad_kernel_center(layer.w, layer.r.shape[2:])
    dw_recon, dr_recon = recon_grads if recon_grads is not None else conv_recon_grads(layer, h)
    comps_w = GradComponents(
        loglik=linalg.conv_backward_weight(delta_zf, h, layer.w.shape) / b,
        logdet=flip_kernel(r_as_w) * m_w,
        recon=dw_recon,
    )
    comps_r = GradComponents(
        loglik=-linalg.conv_backward_weight(delta_xf, z, layer.r.shape) / b,
        logdet=-flip_kernel(w_as_r) * m_r,
        recon=dr_recon,
    )
    return {"w": comps_w, "r": comps_r}


# ---------------------------------------------------------------------------
# Jacobian-vector-product inverse penalty
# ---------------------------------------------------------------------------


def jvp_inverse_penalty(layer, x, probes):
    """Monte-Carlo penalty ||J_g J_f v - v||^2 averaged over probe vectors.

    For the linear layers here the Jacobians are the maps themselves, so
    the evaluation point x is unused; it is kept for interface symmetry
    with data-dependent layers. Returns (loss, {param: gradient}).
    """
    probes = np.asarray(probes, dtype=np.float64)
    if isinstance(layer, FcLayer):
        loss = float(np.mean(recon_loss(layer, probes)))
        dw, dr = fc_recon_grads(layer, probes)
        return loss, {"W": dw, "R": dr}
    if isinstance(layer, ConvLayer):
        loss = float(np.mean(recon_loss(layer, probes)))
        dw, dr = conv_recon_grads(layer, probes)
        return loss, {"w": dw, "r": dr}
    raise TypeError(f"no Jacobian penalty for {type(layer).__name__}")


# ---------------------------------------------------------------------------
# whole-model engine
# ---------------------------------------------------------------------------


def model_gradients(layers, x, mode, strict_conv=False):
    """Gradients of the mixture objective for every parameter of a layer
    stack, as batch means.

    mode 'exact' runs both direction passes and pays for LU inverses;
    mode 'snf' runs a single forward/backward pass and no inverse.
    """
    if mode not in ("exact", "snf"):
        raise ValueError(f"unknown gradient mode {mode!r}")
    f_state = forward_backward(layers, x)
    g_state = g_forward_backward(layers, x) if mode == "exact" else None
    report = GradReport(mode=mode, f_state=f_state, g_state=g_state)
    for idx, cache in enumerate(f_state.caches):
        layer = cache.layer
        if not is_linear(layer):
            continue
        if isinstance(layer, FcLayer):
            loss, dw, dr = _fc_recon(layer, cache.h_in, z=cache.z_out)
        else:
            loss, dw, dr = _conv_recon(layer, cache.h_in, z=cache.z_out)
        report.recon_values[idx] = float(np.mean(loss))
        if mode == "snf":
            if isinstance(layer, FcLayer):
                report.layers[idx] = fc_snf_grads(
                    layer, cache.h_in, cache.delta_z, cache.delta_x,
                    recon_grads=(dw, dr), z=cache.z_out,
                )
            else:
                report.layers[idx] = conv_snf_grads(
                    layer, cache.h_in, cache.delta_z, cache.delta_x,
                    recon_grads=(dw, dr), z=cache.z_out,
                )
        else:
            gc = g_state.caches[idx]
            in_shape = cache.h_in.shape[1:]
            if isinstance(layer, FcLayer):
                report.layers[idx] = fc_exact_grads(
                    layer, cache.h_in, cache.delta_z,
                    delta_zg=gc.delta_z, z_g=gc.z_out, recon_grads=(dw, dr),
                )
                report.logdet_values[idx] = (
                    layer.logdet_theta(), layer.logdet_gamma_inverse()
                )
            else:
                report.layers[idx] = conv_exact_grad(
                    layer, cache.h_in, cache.delta_z, strict=strict_conv,
                    delta_zg=gc.delta_z, z_g=gc.z_out, recon_grads=(dw, dr),
                )
                report.logdet_values[idx] = (
                    layer.logdet_theta(in_shape),
                    layer.logdet_gamma_inverse(in_shape),
                )
    return report
