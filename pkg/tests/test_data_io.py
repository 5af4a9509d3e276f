import struct

import numpy as np
import pytest

from snflow import data
from snflow.errors import ChecksumError, VersionMismatch
from snflow.layers import FcLayer, SmoothLeakyRelu
from snflow.model import FlowModel
from snflow.training import TrainConfig, make_train_state


def write_idx_images(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    n, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", data.IDX_MAGIC_IMAGES, n, h, w))
        fh.write(arr.tobytes())


class TestLoadIdx:
    def test_crafted_fixture(self, tmp_path):
        path = tmp_path / "imgs.idx"
        write_idx_images(path, np.array([[[0, 128], [255, 7]]], dtype=np.uint8))
        got = data.load_idx(str(path))
        assert got.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(got.ravel(), [0, 128, 255, 7])

    def test_labels(self, tmp_path):
        path = tmp_path / "labels.idx"
        with open(path, "wb") as fh:
            fh.write(struct.pack(">II", data.IDX_MAGIC_LABELS, 3))
            fh.write(bytes([5, 0, 9]))
        np.testing.assert_array_equal(data.load_idx(str(path)), [5, 0, 9])

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.idx"
        path.write_bytes(b"")
        with pytest.raises(ValueError, match="truncated"):
            data.load_idx(str(path))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 2, 2) + bytes(4))
        with pytest.raises(ValueError, match="magic"):
            data.load_idx(str(path))

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.idx"
        path.write_bytes(struct.pack(">IIII", data.IDX_MAGIC_IMAGES, 1, 2, 2) + bytes(3))
        with pytest.raises(ValueError, match="truncated"):
            data.load_idx(str(path))


class TestSynthetic2d:
    def test_empty(self):
        assert data.synthetic_2d("ring", 0, 0).shape == (0, 2)

    def test_seed_determinism(self):
        a = data.synthetic_2d("two_moons", 100, 7)
        b = data.synthetic_2d("two_moons", 100, 7)
        np.testing.assert_array_equal(a, b)

    def test_ring_radius_statistics(self):
        pts = data.synthetic_2d("ring", 4000, 3)
        radii = np.linalg.norm(pts, axis=1)
        # radii are N(1, 0.1^2) by construction; sample mean within 3 sigma
        assert abs(radii.mean() - 1.0) <= 3 * 0.1 / np.sqrt(4000)
        assert abs(radii.std() - 0.1) <= 0.01

    def test_grid_centers(self):
        pts = data.synthetic_2d("grid_of_gaussians", 2000, 5)
        nearest = np.round(pts / 2.0) * 2.0
        assert np.max(np.abs(pts - nearest)) < 4 * 0.25 + 1e-9

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            data.synthetic_2d("nope", 1, 0)


class TestSplits:
    def test_deterministic_disjoint_exhaustive(self):
        a = data.split_indices(100, seed=11)
        b = data.split_indices(100, seed=11)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        merged = np.sort(np.concatenate(a))
        np.testing.assert_array_equal(merged, np.arange(100))

    def test_dataset_split_access(self):
        pts = data.synthetic_2d("ring", 50, 0)
        ds = data.make_dataset("synthetic_2d", pts, seed=1)
        assert len(ds.split("train")) == 40
        assert len(ds.split("val")) == 5
        assert len(ds.split("test")) == 5


def small_model_and_state(seed=0):
    rng = np.random.default_rng(seed)
    layers = [
        FcLayer.initialize(3, rng),
        SmoothLeakyRelu(0.3),
        FcLayer.initialize(3, rng),
    ]
    model = FlowModel(layers, (3,), lam=1.0)
    config = TrainConfig(epochs=2, batch_size=8, lr=1e-3, warmup_epochs=0, seed=seed)
    state = make_train_state(model, config)
    return model, state, config


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model, state, _ = small_model_and_state()
        state.rng.random(13)  # advance so the state is nontrivial
        ckpt = data.checkpoint_training(model, state, best_epoch=4, best_val_nll=2.5)
        path = str(tmp_path / "model.ckpt")
        data.save_checkpoint(path, ckpt)
        loaded = data.load_checkpoint(path)
        for name, arr in ckpt.tensors.items():
            np.testing.assert_array_equal(loaded.tensors[name], arr)
        model2, state2, meta = data.restore_training(loaded)
        np.testing.assert_array_equal(model2.layers[0].W, model.layers[0].W)
        np.testing.assert_array_equal(
            state2.adam.m[(0, "W")], state.adam.m[(0, "W")]
        )
        assert state2.rng.bit_generator.state == state.rng.bit_generator.state
        assert meta["best_epoch"] == 4
        assert meta["best_val_nll"] == 2.5
        # the two generators continue identically
        np.testing.assert_array_equal(state2.rng.random(5), state.rng.random(5))

    def test_corrupt_byte_fails_checksum(self, tmp_path):
        model, state, _ = small_model_and_state()
        path = str(tmp_path / "model.ckpt")
        data.save_checkpoint(path, data.checkpoint_training(model, state))
        raw = bytearray(open(path, "rb").read())
        raw[-20] ^= 0x01  # flip one payload bit
        open(path, "wb").write(bytes(raw))
        with pytest.raises(ChecksumError):
            data.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        model, state, _ = small_model_and_state()
        path = str(tmp_path / "model.ckpt")
        data.save_checkpoint(path, data.checkpoint_training(model, state))
        raw = open(path, "rb").read()
        open(path, "wb").write(raw.replace(b"snflow-checkpoint v1", b"snflow-checkpoint v9", 1))
        with pytest.raises(VersionMismatch):
            data.load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello\n---\n1234")
        with pytest.raises(VersionMismatch):
            data.load_checkpoint(str(path))
