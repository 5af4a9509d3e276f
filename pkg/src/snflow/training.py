"""Optimization loop: Adam with bias correction, linear learning-rate
warm-up, global gradient clipping, fixed or adaptive (multiplicative
Lagrange) reconstruction weighting, epoch orchestration with divergence
detection, and per-epoch CSV metrics.

The objective is maximized; gradients flow through Adam as descent on the
negated objective.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import gradients as gradmod
from . import linalg, model as modelmod
from .errors import DivergenceError, SingularMatrix
from .layers import FcLayer, is_linear


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for key, p in params.items():
        state.m[key] = np.zeros_like(p)
        state.v[key] = np.zeros_like(p)
    return state


def adam_step(state, params, grads):
    """One Adam update, in place. grads are gradients of the quantity to
    MINIMIZE; ascent on the training objective is realized by passing its
    negated gradients."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for key in sorted(params):
        g = grads[key]
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[key] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def warmup_lr(base_lr, epoch, warmup_epochs):
    """Linear ramp from 0 at epoch 0 to base_lr at epoch == warmup_epochs."""
    if warmup_epochs <= 0 or epoch >= warmup_epochs:
        return base_lr
    return base_lr * epoch / warmup_epochs


def grad_norm(grads):
    """Global L2 norm across a whole gradient dict, in key order."""
    total = 0.0
    for key in sorted(grads):
        total += float(np.sum(grads[key] ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(grads, max_norm):
    """Scale the whole gradient dict so its global L2 norm is at most
    max_norm."""
    norm = grad_norm(grads)
    scale = min(1.0, max_norm / norm) if norm > 0 else 1.0
    if scale < 1.0:
        for key in grads:
            grads[key] = grads[key] * scale
    return grads


@dataclass
class LambdaController:
    """Reconstruction-weight control.

    'fixed' never mutates lam. 'geco' tracks an exponential moving average
    of (constraint - tolerance) and rescales lam multiplicatively:
    lam <- clamp(lam * exp(gain * ema), lam_min, lam_max).
    """

    mode: str = "fixed"
    lam: float = 1.0
    ema: float = 0.0
    decay: float = 0.99
    gain: float = 0.01
    tolerance: float = 0.01
    lam_min: float = 1e-4
    lam_max: float = 1e6

    def __post_init__(self):
        if self.mode not in ("fixed", "geco"):
            raise ValueError(f"unknown lambda mode {self.mode!r}")
        if self.lam <= 0:
            raise ValueError("lambda must stay positive")


def geco_update(ctrl, recon_value):
    """Advance the controller with one constraint observation; returns the
    (possibly unchanged) new lambda."""
    if ctrl.mode != "geco":
        return ctrl.lam
    ctrl.ema = ctrl.decay * ctrl.ema + (1.0 - ctrl.decay) * (recon_value - ctrl.tolerance)
    ctrl.lam = float(np.clip(ctrl.lam * np.exp(ctrl.gain * ctrl.ema), ctrl.lam_min, ctrl.lam_max))
    return ctrl.lam


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-4
    warmup_epochs: int = 10
    clip_norm: float = None
    lam: float = 1.0
    geco: bool = False
    geco_decay: float = 0.99
    geco_gain: float = 0.01
    geco_tolerance: float = 0.01
    lam_min: float = 1e-4
    lam_max: float = 1e6
    mode: str = "snf"
    seed: int = 0
    threads: int = 1
    # diagnostics and extensions
    angle_every: int = 0  # 0 disables; N samples every Nth step
    resync_exact_inverse: bool = False
    jvp_weight: float = 0.0
    jvp_probes: int = 1
    record_step_losses: bool = False
    divergence_threshold: float = 1e10
    instability_recon_threshold: float = 10.0

    def __post_init__(self):
        if self.mode not in ("snf", "exact"):
            raise ValueError(f"unknown gradient mode {self.mode!r}")
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when given")


@dataclass
class TrainState:
    adam: AdamState
    lam_ctrl: LambdaController
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0


def model_params(model):
    """Live parameter arrays keyed by (layer index, parameter name)."""
    params = {}
    for idx, layer in enumerate(model.layers):
        for name, arr in layer.params().items():
            params[(idx, name)] = arr
    return params


def make_train_state(model, config):
    ctrl = LambdaController(
        mode="geco" if config.geco else "fixed",
        lam=config.lam,
        decay=config.geco_decay,
        gain=config.geco_gain,
        tolerance=config.geco_tolerance,
        lam_min=config.lam_min,
        lam_max=config.lam_max,
    )
    adam = init_adam(model_params(model), lr=config.lr)
    return TrainState(adam=adam, lam_ctrl=ctrl, rng=np.random.default_rng(config.seed))


def resync_inverses(model):
    """Overwrite each fully connected layer's inverse weights with the LU
    inverse of its forward weights (diagnostic device; convolutions have
    no exact same-shape inverse kernel in general)."""
    for layer in model.layers:
        if isinstance(layer, FcLayer):
            layer.set_param("R", linalg.inverse(layer._lu("W")))


def _step_monitor(report, lam):
    """Cheap per-batch objective value for divergence detection.

    Exact mode has every term available; snf mode omits the
    data-independent linear log-determinants (which the snf step never
    computes) and watches the remaining terms.
    """
    f_state = report.f_state
    base_f = modelmod.base_logprob(f_state.z_final)
    act_ld = np.zeros_like(base_f)
    for cache in f_state.caches:
        if hasattr(cache.layer, "forward_with_logdet"):
            d = cache.layer.derivative(cache.h_in)
            act_ld = act_ld + np.sum(np.log(d).reshape(d.shape[0], -1), axis=1)
    recon_total = sum(report.recon_values.values())
    if report.mode == "exact":
        g_state = report.g_state
        base_g = modelmod.base_logprob(g_state.z_final)
        act_ld_g = np.zeros_like(base_g)
        for cache in g_state.caches:
            if hasattr(cache.layer, "forward_with_logdet"):
                d = cache.layer.derivative(cache.h_in)
                act_ld_g = act_ld_g + np.sum(np.log(d).reshape(d.shape[0], -1), axis=1)
        ld_f = sum(v[0] for v in report.logdet_values.values())
        ld_g = sum(v[1] for v in report.logdet_values.values())
        value = 0.5 * float(np.mean(base_f + act_ld)) + 0.5 * ld_f
        value += 0.5 * float(np.mean(base_g + act_ld_g)) + 0.5 * ld_g
    else:
        value = float(np.mean(base_f + act_ld))
    return value - lam * recon_total


def train_step(model, state, config, xb, params=None):
    """One optimizer step on one batch; returns (monitor_value,
    recon_value, per_layer_angles_or_None)."""
    if params is None:
        params = model_params(model)
    if config.resync_exact_inverse:
        resync_inverses(model)
    lam = state.lam_ctrl.lam
    report = model.gradients(xb, config.mode)
    angles = None
    if config.angle_every and config.mode == "snf" and state.step % config.angle_every == 0:
        from . import diagnostics

        exact_report = model.gradients(xb, "exact")
        angles = diagnostics.report_layer_angles(report, exact_report, lam)
    totals = report.totals(lam)
    if config.jvp_weight > 0.0:
        shapes = model._layer_shapes()
        for idx, layer in enumerate(model.layers):
            if not is_linear(layer):
                continue
            probes = state.rng.standard_normal((config.jvp_probes,) + shapes[idx])
            _, jgrads = gradmod.jvp_inverse_penalty(layer, None, probes)
            for name, g in jgrads.items():
                totals[(idx, name)] = totals[(idx, name)] - config.jvp_weight * g
    loss_grads = {key: -g for key, g in totals.items()}
    if config.clip_norm is not None:
        loss_grads = clip_grad_norm(loss_grads, config.clip_norm)
    adam_step(state.adam, params, loss_grads)
    for layer in model.layers:
        if is_linear(layer):
            layer.bump_version()
    for key in sorted(params):
        if not np.all(np.isfinite(params[key])):
            raise DivergenceError(
                f"parameter {key} left the finite range at epoch {state.epoch} "
                f"step {state.step}",
                epoch=state.epoch,
                step=state.step,
            )
    recon_value = float(sum(report.recon_values.values()))
    geco_update(state.lam_ctrl, recon_value)
    monitor = _step_monitor(report, lam)
    state.step += 1
    if not np.isfinite(monitor) or abs(monitor) > config.divergence_threshold:
        raise DivergenceError(
            f"objective {monitor!r} at epoch {state.epoch} step {state.step}",
            epoch=state.epoch,
            step=state.step,
            loss=monitor,
        )
    return monitor, recon_value, angles


def train_epoch(model, data, state, config):
    """One pass over the data in shuffled batches.

    Returns a metrics dict: exact mean NLL over the epoch's data (via the
    amortized cache), mean reconstruction value, current lambda, wall
    seconds, and angle statistics when sampled. Raises DivergenceError
    when the divergence detector trips.
    """
    t0 = time.monotonic()
    n = data.shape[0]
    params = model_params(model)
    state.adam.lr = warmup_lr(config.lr, state.epoch, config.warmup_epochs)
    order = state.rng.permutation(n)
    recons = []
    monitors = []
    angle_samples = []
    for start in range(0, n, config.batch_size):
        xb = data[order[start : start + config.batch_size]]
        monitor, recon_value, angles = train_step(model, state, config, xb, params)
        monitors.append(monitor)
        recons.append(recon_value)
        if angles is not None:
            angle_samples.append(angles)
    state.epoch += 1
    nll = model.nll(data)
    metrics = {
        "nll": nll,
        "recon": float(np.mean(recons)),
        "lambda": state.lam_ctrl.lam,
        "seconds": time.monotonic() - t0,
        "angle_mean": None,
        "angle_std": None,
    }
    if angle_samples:
        per_layer = {}
        for sample in angle_samples:
            for idx, deg in sample.items():
                per_layer.setdefault(idx, []).append(deg)
        layer_means = [float(np.mean(v)) for _, v in sorted(per_layer.items())]
        metrics["angle_mean"] = float(np.mean(layer_means))
        metrics["angle_std"] = float(np.std(layer_means))
        metrics["per_layer_angles"] = {k: float(np.mean(v)) for k, v in sorted(per_layer.items())}
    if config.record_step_losses:
        metrics["step_losses"] = monitors
    return metrics


@dataclass
class TrainResult:
    epoch_rows: list
    diverged: bool = False
    unstable: bool = False
    best_epoch: int = -1
    best_val_nll: float = np.inf
    divergence: DivergenceError = None
    state: TrainState = None


def train(model, train_data, val_data, config, on_epoch=None):
    """Full training run with per-epoch validation and best-epoch tracking.

    on_epoch(model, state, epoch, metrics) runs after each epoch (used for
    checkpointing). Divergence is detected and reported in the result, not
    raised.
    """
    state = make_train_state(model, config)
    result = TrainResult(epoch_rows=[], state=state)
    with linalg.single_thread(config.threads):
        for epoch in range(config.epochs):
            try:
                metrics = train_epoch(model, train_data, state, config)
            except DivergenceError as err:
                result.diverged = True
                result.unstable = True
                result.divergence = err
                break
            except SingularMatrix as err:
                result.diverged = True
                result.unstable = True
                result.divergence = DivergenceError(
                    f"flow became singular: {err}", epoch=state.epoch
                )
                break
            row = dict(metrics, epoch=epoch, split="train")
            result.epoch_rows.append(row)
            if metrics["recon"] > config.instability_recon_threshold:
                result.unstable = True
            val_nll = None
            if val_data is not None and len(val_data):
                val_nll = model.nll(val_data)
                result.epoch_rows.append(
                    {
                        "epoch": epoch,
                        "split": "val",
                        "nll": val_nll,
                        "recon": None,
                        "lambda": state.lam_ctrl.lam,
                        "seconds": None,
                        "angle_mean": None,
                        "angle_std": None,
                    }
                )
                if val_nll < result.best_val_nll:
                    result.best_val_nll = val_nll
                    result.best_epoch = epoch
            if on_epoch is not None:
                on_epoch(model, state, epoch, metrics, val_nll)
    return result


CSV_FIELDS = ("epoch", "split", "nll", "recon", "lambda", "seconds", "angle_mean", "angle_std")


def metrics_to_csv(rows, path):
    """Write per-epoch records as line-oriented CSV."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for row in rows:
            writer.writerow(["" if row.get(k) is None else row.get(k) for k in CSV_FIELDS])
