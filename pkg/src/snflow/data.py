"""Dataset ingestion (IDX image containers, CSV point clouds, built-in 2-D
synthetic densities), deterministic splitting, and checkpoint persistence.

The checkpoint container is a versioned text header (key = value lines)
followed by length-prefixed little-endian float64 tensor blocks and a
trailing CRC32 over the binary payload; round-trips are bit-exact.
"""

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import model as modelmod
from . import training as trainmod
from .errors import ChecksumError, VersionMismatch

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


def load_idx(path):
    """Read an IDX container: images -> uint8 (N, 1, H, W), labels -> (N,).

    Big-endian magic and dimension header; every byte maps to its value in
    [0, 255].
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header")
    magic = int.from_bytes(raw[:4], "big")
    if magic == IDX_MAGIC_IMAGES:
        ndim = 3
    elif magic == IDX_MAGIC_LABELS:
        ndim = 1
    else:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise ValueError(f"{path}: truncated payload ({len(raw) - header} of {count} bytes)")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header, count=count)
    if magic == IDX_MAGIC_IMAGES:
        n, h, w = dims
        return data.reshape(n, 1, h, w).copy()
    return data.copy()


def load_csv_points(path):
    """Point cloud from CSV, one point per line; a non-numeric first row
    is treated as a header."""
    with open(path) as fh:
        first = fh.readline()
    skip = 0
    try:
        [float(v) for v in first.strip().split(",") if v]
    except ValueError:
        skip = 1
    pts = np.loadtxt(path, delimiter=",", skiprows=skip, dtype=np.float64, ndmin=2)
    return pts


def synthetic_2d(name, n, seed):
    """Built-in 2-D densities, deterministic under seed.

    two_moons: two interleaved half circles of radius 1, the second
        shifted to (1, 0.5) and reflected, plus N(0, 0.1^2) noise.
    ring: radius ~ N(1, 0.1^2), angle ~ U[0, 2pi).
    grid_of_gaussians: one of nine centers on {-2, 0, 2}^2, plus
        N(0, 0.25^2) noise.
    """
    rng = np.random.default_rng(seed)
    n = int(n)
    if name == "two_moons":
        t = rng.uniform(0.0, np.pi, size=n)
        which = rng.integers(0, 2, size=n)
        x = np.where(which == 0, np.cos(t), 1.0 - np.cos(t))
        y = np.where(which == 0, np.sin(t), 0.5 - np.sin(t))
        pts = np.stack([x, y], axis=1) + 0.1 * rng.standard_normal((n, 2))
    elif name == "ring":
        radius = 1.0 + 0.1 * rng.standard_normal(n)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        pts = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    elif name == "grid_of_gaussians":
        centers = np.array([(i, j) for i in (-2.0, 0.0, 2.0) for j in (-2.0, 0.0, 2.0)])
        idx = rng.integers(0, len(centers), size=n)
        pts = centers[idx] + 0.25 * rng.standard_normal((n, 2))
    else:
        raise ValueError(f"unknown synthetic dataset {name!r}")
    return pts


def split_indices(n, seed, fractions=(0.8, 0.1, 0.1)):
    """Disjoint, exhaustive train/val/test index split from a seeded
    permutation."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


@dataclass
class Dataset:
    """Data plus its deterministic split and preprocessing reference."""

    kind: str
    data: np.ndarray
    splits: dict
    preprocess_spec: object = None

    def split(self, name):
        return self.data[self.splits[name]]


def make_dataset(kind, data, seed, fractions=(0.8, 0.1, 0.1), preprocess_spec=None):
    train, val, test = split_indices(len(data), seed, fractions)
    return Dataset(
        kind=kind,
        data=data,
        splits={"train": train, "val": val, "test": test},
        preprocess_spec=preprocess_spec,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1
_MAGIC_LINE = "snflow-checkpoint"


@dataclass
class Checkpoint:
    """Versioned container: topology and scalar state in the header,
    float64 tensors in the payload."""

    header: dict
    tensors: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, ckpt):
    """Write atomically: temp file in the same directory, then rename."""
    lines = [f"{_MAGIC_LINE} v{ckpt.version}"]
    for key in sorted(ckpt.header):
        lines.append(f"{key} = {ckpt.header[key]}")
    names = list(ckpt.tensors)
    for i, name in enumerate(names):
        shape = ",".join(str(s) for s in ckpt.tensors[name].shape)
        lines.append(f"tensor.{i} = {name} | {shape}")
    text = "\n".join(lines) + "\n---\n"
    payload = bytearray()
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype=np.float64)
        payload += struct.pack("<Q", arr.size)
        payload += arr.tobytes()
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(text.encode("utf-8"))
        fh.write(bytes(payload))
        fh.write(struct.pack("<I", crc))
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n---\n")
    if sep < 0:
        raise ChecksumError(f"{path}: missing header terminator")
    header_lines = raw[:sep].decode("utf-8").splitlines()
    if not header_lines or not header_lines[0].startswith(_MAGIC_LINE):
        raise VersionMismatch(f"{path}: not a checkpoint file")
    version = header_lines[0].split("v")[-1]
    if version != str(CHECKPOINT_VERSION):
        raise VersionMismatch(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    header = {}
    manifest = []
    for line in header_lines[1:]:
        key, _, value = line.partition(" = ")
        if key.startswith("tensor."):
            name, _, shape = value.partition(" | ")
            dims = tuple(int(s) for s in shape.split(",") if s)
            manifest.append((name, dims))
        else:
            header[key] = value
    body = raw[sep + 5 :]
    if len(body) < 4:
        raise ChecksumError(f"{path}: truncated payload")
    payload, crc_bytes = body[:-4], body[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise ChecksumError(f"{path}: payload CRC mismatch")
    tensors = {}
    offset = 0
    for name, dims in manifest:
        (count,) = struct.unpack_from("<Q", payload, offset)
        offset += 8
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).copy()
        offset += 8 * count
        tensors[name] = arr.reshape(dims)
    return Checkpoint(header=header, tensors=tensors, version=CHECKPOINT_VERSION)


def _rng_state_items(rng):
    state = rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generators are checkpointed")
    return {
        "rng.state": state["state"]["state"],
        "rng.inc": state["state"]["inc"],
        "rng.has_uint32": state["has_uint32"],
        "rng.uinteger": state["uinteger"],
    }


def _restore_rng(header):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(header["rng.state"]), "inc": int(header["rng.inc"])},
        "has_uint32": int(header["rng.has_uint32"]),
        "uinteger": int(header["rng.uinteger"]),
    }
    return rng


def checkpoint_training(model, state, best_epoch=-1, best_val_nll=None):
    """Pack model topology, parameters, optimizer and controller state,
    and the RNG state into a Checkpoint."""
    header = {
        "in_shape": ",".join(str(s) for s in model.in_shape),
        "lam_model": repr(model.lam),
        "epoch": state.epoch,
        "step": state.step,
        "adam.lr": repr(state.adam.lr),
        "adam.beta1": repr(state.adam.beta1),
        "adam.beta2": repr(state.adam.beta2),
        "adam.eps": repr(state.adam.eps),
        "adam.step": state.adam.step,
        "ctrl.mode": state.lam_ctrl.mode,
        "ctrl.lam": repr(state.lam_ctrl.lam),
        "ctrl.ema": repr(state.lam_ctrl.ema),
        "ctrl.decay": repr(state.lam_ctrl.decay),
        "ctrl.gain": repr(state.lam_ctrl.gain),
        "ctrl.tolerance": repr(state.lam_ctrl.tolerance),
        "ctrl.lam_min": repr(state.lam_ctrl.lam_min),
        "ctrl.lam_max": repr(state.lam_ctrl.lam_max),
        "best.epoch": best_epoch,
        "best.val_nll": repr(best_val_nll) if best_val_nll is not None else "",
    }
    header.update(_rng_state_items(state.rng))
    for i, token in enumerate(modelmod.describe_layers(model.layers)):
        header[f"layer.{i}"] = token
    tensors = {}
    for (idx, name), arr in trainmod.model_params(model).items():
        tensors[f"param.{idx}.{name}"] = arr
        tensors[f"adam.m.{idx}.{name}"] = state.adam.m[(idx, name)]
        tensors[f"adam.v.{idx}.{name}"] = state.adam.v[(idx, name)]
    return Checkpoint(header=header, tensors=tensors)


def restore_training(ckpt):
    """Rebuild (model, state) from a Checkpoint; training resumed from
    here reproduces the original run bit for bit (single-threaded)."""
    header = ckpt.header
    tokens = []
    i = 0
    while f"layer.{i}" in header:
        tokens.append(header[f"layer.{i}"])
        i += 1
    layers = modelmod.build_layers(tokens)
    in_shape = tuple(int(s) for s in header["in_shape"].split(","))
    model = modelmod.FlowModel(layers, in_shape, lam=float(header["lam_model"]))
    adam = trainmod.AdamState(
        lr=float(header["adam.lr"]),
        beta1=float(header["adam.beta1"]),
        beta2=float(header["adam.beta2"]),
        eps=float(header["adam.eps"]),
        step=int(header["adam.step"]),
    )
    for idx, layer in enumerate(layers):
        for name in layer.param_names:
            layer.set_param(name, ckpt.tensors[f"param.{idx}.{name}"])
            adam.m[(idx, name)] = ckpt.tensors[f"adam.m.{idx}.{name}"].copy()
            adam.v[(idx, name)] = ckpt.tensors[f"adam.v.{idx}.{name}"].copy()
    ctrl = trainmod.LambdaController(
        mode=header["ctrl.mode"],
        lam=float(header["ctrl.lam"]),
        ema=float(header["ctrl.ema"]),
        decay=float(header["ctrl.decay"]),
        gain=float(header["ctrl.gain"]),
        tolerance=float(header["ctrl.tolerance"]),
        lam_min=float(header["ctrl.lam_min"]),
        lam_max=float(header["ctrl.lam_max"]),
    )
    state = trainmod.TrainState(
        adam=adam,
        lam_ctrl=ctrl,
        rng=_restore_rng(header),
        epoch=int(header["epoch"]),
        step=int(header["step"]),
    )
    best_epoch = int(header.get("best.epoch", -1))
    best_val = float(header["best.val_nll"]) if header.get("best.val_nll") else None
    return model, state, {"best_epoch": best_epoch, "best_val_nll": best_val}
