"""Command-line front end: train, eval, sample, bench, and diag-angle.

Batch-oriented: flags (or a `key = value` config file, flags win) select a
model topology, a dataset, and a gradient mode; outputs are plain CSV and
PGM files under --out. Exit codes: 0 success, 1 numerical divergence,
2 usage or configuration error.
"""

import argparse
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import data as datamod
from . import diagnostics, linalg, training
from .errors import DivergenceError, SnflowError, VersionMismatch
from .layers import ConvLayer, FcLayer, SmoothLeakyRelu, SqueezeLayer
from .model import FlowModel, PreprocessSpec, preprocess, deprocess

MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)
MNIST_URL = "https://storage.googleapis.com/cvdf-datasets/mnist/"


class UsageError(SnflowError):
    pass


@dataclass
class DataBundle:
    dataset: object
    in_shape: tuple
    pixel_logdet: np.ndarray = None  # preprocessing contribution, per example


def _parse_config_file(path):
    values = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise UsageError(f"{path}:{lineno}: expected 'key = value'")
                values[key.strip().replace("-", "_")] = value.strip()
        return values
    except OSError as err:
        raise UsageError(f"cannot read config file: {err}")


def _add_common(parser):
    parser.add_argument("--config", help="key = value config file; flags override")
    parser.add_argument("--model", help="fc2 | conv9 | custom:<spec>")
    parser.add_argument("--data", help="two_moons | ring | grid | idx:<path> | csv:<path>")
    parser.add_argument("--mode", choices=["exact", "snf"], help="gradient mode")
    parser.add_argument("--lambda", dest="lam", type=float, help="reconstruction weight")
    parser.add_argument("--geco", action="store_true", default=None,
                        help="adapt lambda multiplicatively from the recon constraint")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--warmup", type=int, help="linear lr warm-up epochs")
    parser.add_argument("--clip", type=float, help="global gradient-norm clip")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--asym-kernel", dest="asym_kernel", type=int,
                        help="inverse-kernel spatial size for conv layers")
    parser.add_argument("--jvp-penalty", dest="jvp_penalty", type=float,
                        help="weight of the Jacobian-vector-product inverse penalty")
    parser.add_argument("--n-samples", dest="n_samples", type=int,
                        help="synthetic dataset size")


DEFAULTS = {
    "model": "fc2",
    "data": "two_moons",
    "mode": "snf",
    "lam": 1.0,
    "geco": False,
    "epochs": 50,
    "batch": 128,
    "lr": 1e-4,
    "warmup": 10,
    "clip": None,
    "seed": 0,
    "threads": 1,
    "out": "out",
    "asym_kernel": None,
    "jvp_penalty": 0.0,
    "n_samples": 2048,
}

_CONVERTERS = {
    "lam": float, "lr": float, "clip": float, "jvp_penalty": float,
    "epochs": int, "batch": int, "warmup": int, "seed": int, "threads": int,
    "asym_kernel": int, "n_samples": int,
    "geco": lambda s: s.lower() in ("1", "true", "yes", "on"),
}


def resolve_options(args):
    """defaults < config file < explicit flags."""
    from_file = _parse_config_file(args.config) if getattr(args, "config", None) else {}
    options = dict(DEFAULTS)
    for key, raw in from_file.items():
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        options[key] = _CONVERTERS.get(key, str)(raw)
    for key in DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            options[key] = flag
    return options


def build_dataset(options):
    spec = options["data"]
    seed = options["seed"]
    if spec in ("two_moons", "ring", "grid"):
        name = "grid_of_gaussians" if spec == "grid" else spec
        pts = datamod.synthetic_2d(name, options["n_samples"], seed)
        ds = datamod.make_dataset(name, pts, seed)
        return DataBundle(dataset=ds, in_shape=(2,))
    if spec.startswith("csv:"):
        pts = datamod.load_csv_points(spec[4:])
        ds = datamod.make_dataset("csv_points", pts, seed)
        return DataBundle(dataset=ds, in_shape=(pts.shape[1],))
    if spec.startswith("idx:"):
        path = spec[4:]
        if options.get("download"):
            maybe_download_mnist(os.path.dirname(path) or ".")
        pixels = datamod.load_idx(path)
        pre = PreprocessSpec(seed=seed)
        x, logdet = preprocess(pre, pixels)
        n = len(x)
        if n == 60000:
            # standard convention: first 50k train, last 10k validation
            idx = np.arange(n)
            splits = {"train": idx[:50000], "val": idx[50000:], "test": idx[50000:]}
            ds = datamod.Dataset(kind="idx_images", data=x, splits=splits, preprocess_spec=pre)
        else:
            ds = datamod.make_dataset("idx_images", x, seed, preprocess_spec=pre)
        return DataBundle(dataset=ds, in_shape=x.shape[1:], pixel_logdet=logdet)
    raise UsageError(f"unknown data spec {spec!r}")


def _fc2_layers(dim, rng):
    return [
        FcLayer.initialize(dim, rng),
        SmoothLeakyRelu(0.3),
        FcLayer.initialize(dim, rng),
    ]


def _conv9_layers(in_shape, rng, r_ksize=None):
    c, h, w = in_shape
    if h % 4 or w % 4:
        raise UsageError(f"conv9 needs spatial dims divisible by 4, got {h}x{w}")
    layers = []
    channels = c
    for block in range(3):
        for i in range(3):
            layers.append(ConvLayer.initialize(channels, 3, rng, r_ksize=r_ksize))
            if not (block == 2 and i == 2):
                layers.append(SmoothLeakyRelu(0.3))
        if block < 2:
            layers.append(SqueezeLayer(2))
            channels *= 4
    return layers


def _custom_layers(spec, in_shape, rng, r_ksize=None):
    layers = []
    shape = tuple(in_shape)
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        parts = token.split(":")
        kind = parts[0]
        try:
            if kind == "fc":
                if len(shape) != 1:
                    raise UsageError("fc layer needs flat data")
                dim = int(parts[1]) if len(parts) > 1 else shape[0]
                if dim != shape[0]:
                    raise UsageError(f"fc:{dim} does not match data dim {shape[0]}")
                layers.append(FcLayer.initialize(dim, rng))
            elif kind == "conv":
                if len(shape) != 3:
                    raise UsageError("conv layer needs image data")
                k = int(parts[1]) if len(parts) > 1 else 3
                rk = int(parts[2]) if len(parts) > 2 else r_ksize
                layers.append(ConvLayer.initialize(shape[0], k, rng, r_ksize=rk))
            elif kind == "slrelu":
                alpha = float(parts[1]) if len(parts) > 1 else 0.3
                layers.append(SmoothLeakyRelu(alpha))
            elif kind == "squeeze":
                layers.append(SqueezeLayer(int(parts[1]) if len(parts) > 1 else 2))
            else:
                raise UsageError(f"unknown layer token {token!r}")
        except (ValueError, IndexError):
            raise UsageError(f"malformed layer token {token!r}")
        shape = layers[-1].out_shape(shape)
    if not layers:
        raise UsageError("custom topology is empty")
    return layers


def build_model(options, in_shape):
    rng = np.random.default_rng(options["seed"])
    name = options["model"]
    try:
        if name == "fc2":
            if len(in_shape) != 1:
                raise UsageError("fc2 expects flat data; use a conv model for images")
            layers = _fc2_layers(in_shape[0], rng)
        elif name == "conv9":
            if len(in_shape) != 3:
                raise UsageError("conv9 expects image data")
            layers = _conv9_layers(in_shape, rng, options["asym_kernel"])
        elif name.startswith("custom:"):
            layers = _custom_layers(name[7:], in_shape, rng, options["asym_kernel"])
        else:
            raise UsageError(f"unknown model {name!r}")
        return FlowModel(layers, in_shape, lam=options["lam"])
    except ValueError as err:
        raise UsageError(str(err))


def make_train_config(options, **overrides):
    kwargs = dict(
        epochs=options["epochs"],
        batch_size=options["batch"],
        lr=options["lr"],
        warmup_epochs=options["warmup"],
        clip_norm=options["clip"],
        lam=options["lam"],
        geco=options["geco"],
        mode=options["mode"],
        seed=options["seed"],
        threads=options["threads"],
        jvp_weight=options["jvp_penalty"],
    )
    kwargs.update(overrides)
    try:
        return training.TrainConfig(**kwargs)
    except ValueError as err:
        raise UsageError(str(err))


def maybe_download_mnist(directory):
    """Fetch the four standard IDX files if absent (best effort)."""
    import urllib.request

    os.makedirs(directory, exist_ok=True)
    for name in MNIST_FILES:
        gz = name + ".gz"
        target = os.path.join(directory, name)
        if os.path.exists(target):
            continue
        print(f"downloading {gz} ...", file=sys.stderr)
        try:
            import gzip

            tmp, _ = urllib.request.urlretrieve(MNIST_URL + gz)
            with gzip.open(tmp) as src, open(target, "wb") as dst:
                dst.write(src.read())
        except Exception as err:
            raise UsageError(f"could not download {gz}: {err}")


def _nll_with_pixel_terms(model, bundle, split):
    xs = bundle.dataset.split(split)
    nll = model.nll(xs)
    if bundle.pixel_logdet is not None:
        nll = nll - float(np.mean(bundle.pixel_logdet[bundle.dataset.splits[split]]))
    return nll


def cmd_train(options):
    bundle = build_dataset(options)
    model = build_model(options, bundle.in_shape)
    config = make_train_config(options)
    out = options["out"]
    os.makedirs(out, exist_ok=True)
    best = {"nll": np.inf}

    def on_epoch(mdl, state, epoch, metrics, val_nll):
        if val_nll is not None and val_nll < best["nll"]:
            best["nll"] = val_nll
            ckpt = datamod.checkpoint_training(mdl, state, best_epoch=epoch, best_val_nll=val_nll)
            datamod.save_checkpoint(os.path.join(out, "best.ckpt"), ckpt)

    result = training.train(
        model,
        bundle.dataset.split("train"),
        bundle.dataset.split("val"),
        config,
        on_epoch=on_epoch,
    )
    training.metrics_to_csv(result.epoch_rows, os.path.join(out, "metrics.csv"))
    if result.diverged:
        print(f"training diverged: {result.divergence}", file=sys.stderr)
        return 1
    ckpt = datamod.checkpoint_training(
        model, result.state, best_epoch=result.best_epoch, best_val_nll=result.best_val_nll
    )
    datamod.save_checkpoint(os.path.join(out, "final.ckpt"), ckpt)
    last_train = [r for r in result.epoch_rows if r["split"] == "train"][-1]
    print(
        f"trained {config.epochs} epochs mode={config.mode} "
        f"final_train_nll={last_train['nll']:.4f} recon={last_train['recon']:.3e} "
        f"unstable={result.unstable}"
    )
    return 0


def _load_model(path):
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    model, state, meta = datamod.restore_training(datamod.load_checkpoint(path))
    return model, state, meta


def cmd_eval(options, checkpoint, split):
    import time

    model, _, _ = _load_model(checkpoint)
    bundle = build_dataset(options)
    if bundle.in_shape != model.in_shape:
        raise UsageError(
            f"data shape {bundle.in_shape} does not match checkpoint {model.in_shape}"
        )
    with linalg.single_thread(options["threads"]):
        linalg.reset_lu_call_count()
        t0 = time.monotonic()
        model.amortize_logdets()
        amortize_s = time.monotonic() - t0
        amortize_lu = linalg.lu_call_count()
        linalg.reset_lu_call_count()
        t0 = time.monotonic()
        nll = _nll_with_pixel_terms(model, bundle, split)
        eval_s = time.monotonic() - t0
        eval_lu = linalg.lu_call_count()
    dim = model.dim
    bits = nll / (dim * np.log(2.0))
    print(f"split={split} nll_nats={nll:.6f} bits_per_dim={bits:.6f}")
    print(
        f"amortize_lu={amortize_lu} eval_lu={eval_lu} "
        f"amortize_seconds={amortize_s:.4f} eval_seconds={eval_s:.4f}"
    )
    return 0


def _write_pgm(path, img):
    """8-bit binary PGM."""
    arr = np.clip(np.round(img), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def cmd_sample(options, checkpoint, n, inverse_mode):
    model, _, _ = _load_model(checkpoint)
    out = options["out"]
    os.makedirs(out, exist_ok=True)
    mode = {"learned": "learned_inverse", "exact": "exact_inverse"}[inverse_mode]
    with linalg.single_thread(options["threads"]):
        samples = model.sample(n, mode, seed=options["seed"])
        other = model.sample(
            n, "exact_inverse" if mode == "learned_inverse" else "learned_inverse",
            seed=options["seed"],
        )
    gap = float(np.mean(np.linalg.norm(
        samples.reshape(n, -1) - other.reshape(n, -1), axis=1
    )))
    if len(model.in_shape) == 1:
        path = os.path.join(out, "samples.csv")
        np.savetxt(path, samples, delimiter=",")
        print(f"wrote {path}")
    else:
        pre = PreprocessSpec(seed=options["seed"])
        pixels = deprocess(pre, samples)
        for i in range(n):
            img = pixels[i].reshape(model.in_shape)[0]
            path = os.path.join(out, f"sample_{i:03d}.pgm")
            _write_pgm(path, img)
        print(f"wrote {n} PGM files to {out}")
    print(f"inverse_mode={inverse_mode} mean_l2_gap_to_other_mode={gap:.6e}")
    return 0


def cmd_bench(options, dims, modes, n_batches):
    out = options["out"]
    os.makedirs(out, exist_ok=True)
    records = []
    for mode in modes:
        recs = diagnostics.timing_sweep(
            dims, mode, batch=options["batch"], n_batches=n_batches, seed=options["seed"]
        )
        records.extend(recs)
        slope = diagnostics.fit_loglog_slope(
            [r.dim for r in recs], [r.mean_seconds for r in recs]
        )
        print(f"mode={mode} loglog_slope={slope:.3f} "
              + " ".join(f"D{r.dim}={r.mean_seconds * 1e3:.2f}ms" for r in recs))
    path = os.path.join(out, "timing.csv")
    diagnostics.write_timing_csv(records, path)
    print(f"wrote {path}")
    return 0


def cmd_diag_angle(options, angle_every):
    bundle = build_dataset(options)
    model = build_model(options, bundle.in_shape)
    config = make_train_config(options, angle_every=max(1, angle_every))
    out = options["out"]
    os.makedirs(out, exist_ok=True)
    with linalg.single_thread(options["threads"]):
        records = diagnostics.angle_sweep(
            model,
            bundle.dataset.split("train"),
            options["epochs"],
            config=config,
            angle_every=angle_every,
        )
    path = os.path.join(out, "angles.csv")
    diagnostics.write_angles_csv(records, path)
    final = records[-1]
    print(f"wrote {path}")
    print(f"final_epoch_angle_mean={final.mean:.6f} std={final.std:.6f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="snflow",
        description="Density estimation with self-normalizing flows.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a model, writing metrics and checkpoints")
    _add_common(p_train)
    p_train.add_argument("--download", action="store_true", default=None,
                         help="fetch MNIST IDX files next to the idx: path if missing")

    p_eval = sub.add_parser("eval", help="exact NLL of a checkpoint on a data split")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test", choices=["train", "val", "test"])

    p_sample = sub.add_parser("sample", help="draw samples through an inverse")
    _add_common(p_sample)
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("-n", type=int, default=16)
    p_sample.add_argument("--inverse", default="learned", choices=["learned", "exact"])

    p_bench = sub.add_parser("bench", help="time-per-batch scaling across dimensions")
    _add_common(p_bench)
    p_bench.add_argument("--dims", default="64,128,256,512,1024")
    p_bench.add_argument("--modes", default="snf,exact")
    p_bench.add_argument("--n-batches", dest="n_batches", type=int, default=24)

    p_angle = sub.add_parser("diag-angle", help="gradient angle tracking during snf training")
    _add_common(p_angle)
    p_angle.add_argument("--angle-every", dest="angle_every", type=int, default=10)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        options = resolve_options(args)
        if args.command == "train":
            options["download"] = bool(getattr(args, "download", False))
            return cmd_train(options)
        if args.command == "eval":
            return cmd_eval(options, args.checkpoint, args.split)
        if args.command == "sample":
            return cmd_sample(options, args.checkpoint, args.n, args.inverse)
        if args.command == "bench":
            dims = [int(d) for d in args.dims.split(",") if d]
            modes = [m.strip() for m in args.modes.split(",") if m.strip()]
            for mode in modes:
                if mode not in ("snf", "exact"):
                    raise UsageError(f"unknown mode {mode!r}")
            return cmd_bench(options, dims, modes, args.n_batches)
        if args.command == "diag-angle":
            return cmd_diag_angle(options, args.angle_every)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (VersionMismatch,) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except DivergenceError as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
