"""Track the angle between the self-normalizing gradient and the exact
gradient over training.

The approximation replaces inverse-transpose terms with the learned
inverse weights, so whenever the reconstruction constraint is tight the
two gradients nearly coincide. A deliberately corrupted inverse shows the
angle as a useful health signal.
"""

import numpy as np

from snflow import data, diagnostics, training
from snflow.layers import FcLayer, SmoothLeakyRelu
from snflow.model import FlowModel


def make_model(seed, corrupt=False):
    rng = np.random.default_rng(seed)
    layers = [
        FcLayer.initialize(2, rng),
        SmoothLeakyRelu(0.3),
        FcLayer.initialize(2, rng),
    ]
    if corrupt:
        noise = np.random.default_rng(99)
        for layer in layers:
            if isinstance(layer, FcLayer):
                layer.set_param("R", layer.R + 0.5 * noise.normal(size=layer.R.shape))
    return FlowModel(layers, (2,), lam=1.0)


def sweep(corrupt):
    model = make_model(seed=0, corrupt=corrupt)
    pts = data.synthetic_2d("two_moons", 1024, seed=0)
    config = training.TrainConfig(
        epochs=30, batch_size=128, lr=1e-4, warmup_epochs=0, mode="snf", seed=0
    )
    return diagnostics.angle_sweep(model, pts, 30, config=config, angle_every=1)


def main():
    healthy = sweep(corrupt=False)
    corrupted = sweep(corrupt=True)
    print(f"{'epoch':>5} {'healthy deg':>12} {'corrupted deg':>14}")
    for h, c in zip(healthy, corrupted):
        if h.epoch % 5 == 0 or h.epoch == len(healthy) - 1:
            print(f"{h.epoch:>5} {h.mean:>12.4f} {c.mean:>14.4f}")
    print(f"\nfinal healthy mean angle: {healthy[-1].mean:.4f} degrees "
          f"(std across layers {healthy[-1].std:.4f})")
    print(f"final corrupted mean angle: {corrupted[-1].mean:.4f} degrees")


if __name__ == "__main__":
    main()
