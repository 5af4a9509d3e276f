"""Measurement and oracle tools: the angle between self-normalizing and
exact gradients over training, time-per-batch scaling across input
dimensionality, and the brute-force finite-difference oracles used
throughout the test suite.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import DegenerateInput
from .layers import FcLayer
from .model import FlowModel


def gradient_angle(g1, g2):
    """Angle in degrees between two flattened gradients: the arccosine of
    the clamped cosine similarity, invariant under positive rescaling of
    either side.

    Evaluated through the equivalent two-argument arctangent of the
    normalized sum/difference, which is exact at 0 and 180 degrees where
    the cosine form loses half its digits.
    """
    g1 = np.asarray(g1, dtype=np.float64).ravel()
    g2 = np.asarray(g2, dtype=np.float64).ravel()
    if g1.shape != g2.shape:
        raise ValueError(f"length mismatch: {g1.size} vs {g2.size}")
    n1 = np.linalg.norm(g1)
    n2 = np.linalg.norm(g2)
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateInput("angle undefined for a zero gradient")
    u = g1 / n1
    v = g2 / n2
    rad = 2.0 * np.arctan2(np.linalg.norm(u - v), np.linalg.norm(u + v))
    return float(np.degrees(rad))


def report_layer_angles(report_a, report_b, lam):
    """Per-layer angles between two gradient reports: each layer's
    parameter gradients are concatenated before the angle is taken."""
    angles = {}
    for idx in sorted(report_a.layers):
        names = sorted(report_a.layers[idx])
        a = np.concatenate([report_a.layers[idx][n].total(lam).ravel() for n in names])
        b = np.concatenate([report_b.layers[idx][n].total(lam).ravel() for n in names])
        angles[idx] = gradient_angle(a, b)
    return angles


def report_global_angle(report_a, report_b, lam):
    """Single angle over the concatenation of every parameter gradient."""
    keys = sorted(report_a.totals(lam))
    ta, tb = report_a.totals(lam), report_b.totals(lam)
    a = np.concatenate([ta[k].ravel() for k in keys])
    b = np.concatenate([tb[k].ravel() for k in keys])
    return gradient_angle(a, b)


# ---------------------------------------------------------------------------
# finite-difference oracles
# ---------------------------------------------------------------------------


def finite_diff_jacobian(fn, x, h=1e-6):
    """Jacobian of a vector function by central differences, column by
    column."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.asarray(fn(x))
    jac = np.zeros((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x).ravel()
        e[j] = h
        e = e.reshape(x.shape)
        jac[:, j] = (np.asarray(fn(x + e)).ravel() - np.asarray(fn(x - e)).ravel()) / (2 * h)
    return jac


def finite_diff_grad(fn, arr, rel_step=1e-5):
    """Gradient of a scalar function of an array by central differences.

    Perturbs the given array in place (so closures over live parameters
    see every step) and restores it. Step per entry:
    rel_step * max(1, |value|), balancing truncation against round-off at
    float64.
    """
    if not isinstance(arr, np.ndarray) or arr.dtype != np.float64:
        raise TypeError("finite_diff_grad needs a live float64 array")
    grad = np.zeros_like(arr)
    gflat = grad.ravel()
    for i in range(arr.size):
        old = arr.flat[i]
        h = rel_step * max(1.0, abs(old))
        arr.flat[i] = old + h
        fp = fn(arr)
        arr.flat[i] = old - h
        fm = fn(arr)
        arr.flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def fit_loglog_slope(dims, values):
    """Least-squares slope of log(values) against log(dims)."""
    x = np.log(np.asarray(dims, dtype=np.float64))
    y = np.log(np.asarray(values, dtype=np.float64))
    x = x - x.mean()
    return float(np.sum(x * (y - y.mean())) / np.sum(x * x))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class AngleRecord:
    """Gradient-angle statistics for one training epoch."""

    epoch: int
    per_layer: dict
    mean: float
    std: float


@dataclass
class TimingRecord:
    """Time-per-batch statistics for one dimensionality and mode."""

    dim: int
    mode: str
    mean_seconds: float
    std_seconds: float
    n_batches: int


def angle_sweep(model, data, n_epochs, config=None, angle_every=10):
    """Train in snf mode while measuring (but not applying) exact
    gradients on a subset of steps; returns one AngleRecord per epoch.

    The std is taken across the per-layer mean angles within the epoch.
    """
    from . import training

    if config is None:
        config = training.TrainConfig(epochs=n_epochs, mode="snf")
    config.mode = "snf"
    config.angle_every = max(1, int(angle_every))
    state = training.make_train_state(model, config)
    records = []
    for epoch in range(n_epochs):
        metrics = training.train_epoch(model, data, state, config)
        per_layer = metrics.get("per_layer_angles") or {}
        records.append(
            AngleRecord(
                epoch=epoch,
                per_layer=per_layer,
                mean=metrics["angle_mean"],
                std=metrics["angle_std"],
            )
        )
    return records


def timing_sweep(dims, mode, batch=128, n_batches=24, seed=0, lr=1e-4):
    """Time the full optimizer step of a single fully connected layer (no
    activation) per batch across input dimensionalities.

    Each dimension runs its batches consecutively (warm caches, as in real
    training). The whole sweep runs twice with the passes separated in
    time, and each dimension keeps the faster pass's statistics, so a
    transient machine slowdown cannot inflate a dimension unless it spans
    both passes. Within a pass the slowest fifth of samples is dropped as
    scheduler spikes. n_batches is a per-pass floor; small dimensions run
    more batches so their sub-millisecond means are stable. The core loop
    runs with BLAS pinned to one thread.
    """
    from . import training

    dims = [int(d) for d in dims]
    passes = {dim: [] for dim in dims}
    with linalg.single_thread(1):
        for _ in range(2):
            for dim in dims:
                count = max(n_batches, min(128, 16384 // max(1, dim)))
                rng = np.random.default_rng(seed + dim)
                layer = FcLayer.initialize(dim, rng)
                model = FlowModel([layer], (dim,), lam=1.0)
                config = training.TrainConfig(
                    epochs=1, batch_size=batch, lr=lr, warmup_epochs=0,
                    mode=mode, seed=seed,
                )
                state = training.make_train_state(model, config)
                params = training.model_params(model)
                data = rng.standard_normal((count + 1, batch, dim))
                training.train_step(model, state, config, data[count], params)
                times = []
                for i in range(count):
                    t0 = time.perf_counter()
                    training.train_step(model, state, config, data[i], params)
                    times.append(time.perf_counter() - t0)
                core = np.sort(np.asarray(times))
                core = core[: max(1, int(np.ceil(0.8 * core.size)))]
                passes[dim].append((float(core.mean()), float(core.std()), core.size))
    records = []
    for dim in dims:
        mean_s, std_s, n = min(passes[dim])
        records.append(
            TimingRecord(
                dim=dim, mode=mode, mean_seconds=mean_s, std_seconds=std_s,
                n_batches=int(n),
            )
        )
    return records


def write_angles_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "layer", "degrees"])
        for rec in records:
            for idx, deg in sorted(rec.per_layer.items()):
                writer.writerow([rec.epoch, idx, deg])


def write_timing_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["D", "mode", "mean_s", "std_s"])
        for rec in records:
            writer.writerow([rec.dim, rec.mode, rec.mean_seconds, rec.std_seconds])
