import os
import struct

import numpy as np
import pytest

from snflow import cli, data


def run(args, tmp_path, extra=()):
    return cli.main(list(args) + ["--out", str(tmp_path / "out")] + list(extra))


BASE_TRAIN = [
    "train", "--model", "fc2", "--data", "two_moons", "--mode", "snf",
    "--lambda", "1", "--epochs", "2", "--batch", "64", "--lr", "1e-3",
    "--warmup", "0", "--seed", "0", "--n-samples", "256",
]


class TestTrain:
    def test_train_writes_metrics_and_checkpoints(self, tmp_path, capsys):
        assert run(BASE_TRAIN, tmp_path) == 0
        out = tmp_path / "out"
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert lines[0].startswith("epoch,split,nll")
        # 2 epochs x (train + val) rows
        assert len(lines) == 5
        assert (out / "best.ckpt").exists()
        assert (out / "final.ckpt").exists()
        assert "final_train_nll" in capsys.readouterr().out

    def test_exact_mode_comparable(self, tmp_path):
        args = list(BASE_TRAIN)
        args[args.index("--mode") + 1] = "exact"
        assert run(args, tmp_path) == 0
        lines = (tmp_path / "out" / "metrics.csv").read_text().strip().splitlines()
        nll = float(lines[1].split(",")[2])
        assert np.isfinite(nll)

    def test_invalid_topology_exits_2(self, tmp_path, capsys):
        args = list(BASE_TRAIN)
        args[args.index("--model") + 1] = "custom:conv:3"
        assert run(args, tmp_path) == 2
        assert "error" in capsys.readouterr().err

    def test_unknown_model_exits_2(self, tmp_path):
        args = list(BASE_TRAIN)
        args[args.index("--model") + 1] = "resnet50"
        assert run(args, tmp_path) == 2

    def test_config_file_and_flag_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs = 3\nlr = 1e-3\nwarmup = 0\nn_samples = 256\nbatch = 64\n")
        args = [
            "train", "--model", "fc2", "--data", "ring", "--config", str(cfg),
            "--seed", "1", "--epochs", "1",  # flag beats file
        ]
        assert run(args, tmp_path) == 0
        lines = (tmp_path / "out" / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 3  # 1 epoch: header + train + val

    def test_unknown_config_key_exits_2(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("optimizer = sgd\n")
        assert run(["train", "--config", str(cfg)], tmp_path) == 2


class TestEvalSample:
    @pytest.fixture()
    def trained(self, tmp_path):
        assert run(BASE_TRAIN, tmp_path) == 0
        return tmp_path / "out" / "final.ckpt"

    def test_eval_deterministic_and_amortized(self, trained, tmp_path, capsys):
        args = [
            "eval", "--checkpoint", str(trained), "--data", "two_moons",
            "--seed", "0", "--n-samples", "256", "--split", "test",
        ]
        assert run(args, tmp_path) == 0
        first = capsys.readouterr().out
        assert run(args, tmp_path) == 0
        second = capsys.readouterr().out
        assert first.splitlines()[0] == second.splitlines()[0]
        assert "eval_lu=0" in first

    def test_eval_missing_checkpoint_exits_2(self, tmp_path, capsys):
        args = ["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", "two_moons"]
        assert run(args, tmp_path) == 2

    def test_sample_csv_and_gap(self, trained, tmp_path, capsys):
        args = [
            "sample", "--checkpoint", str(trained), "-n", "8",
            "--inverse", "learned", "--seed", "3",
        ]
        assert run(args, tmp_path) == 0
        out = capsys.readouterr().out
        assert "mean_l2_gap_to_other_mode=" in out
        pts = np.loadtxt(tmp_path / "out" / "samples.csv", delimiter=",")
        assert pts.shape == (8, 2)

    def test_sample_seed_determinism(self, trained, tmp_path):
        args = [
            "sample", "--checkpoint", str(trained), "-n", "4",
            "--inverse", "exact", "--seed", "9",
        ]
        assert run(args, tmp_path) == 0
        first = (tmp_path / "out" / "samples.csv").read_bytes()
        assert run(args, tmp_path) == 0
        assert (tmp_path / "out" / "samples.csv").read_bytes() == first


class TestBenchAngle:
    def test_bench_writes_csv_and_slopes(self, tmp_path, capsys):
        args = [
            "bench", "--dims", "8,16", "--modes", "snf,exact",
            "--batch", "16", "--n-batches", "6", "--seed", "0",
        ]
        assert run(args, tmp_path) == 0
        out = capsys.readouterr().out
        assert out.count("loglog_slope=") == 2
        lines = (tmp_path / "out" / "timing.csv").read_text().strip().splitlines()
        assert lines[0] == "D,mode,mean_s,std_s"
        assert len(lines) == 5

    def test_bench_bad_mode_exits_2(self, tmp_path):
        assert run(["bench", "--modes", "quantum"], tmp_path) == 2

    def test_diag_angle(self, tmp_path, capsys):
        args = [
            "diag-angle", "--model", "fc2", "--data", "two_moons",
            "--epochs", "2", "--batch", "64", "--lr", "1e-3", "--warmup", "0",
            "--seed", "0", "--n-samples", "256", "--angle-every", "1",
        ]
        assert run(args, tmp_path) == 0
        out = capsys.readouterr().out
        assert "final_epoch_angle_mean=" in out
        lines = (tmp_path / "out" / "angles.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,layer,degrees"
        assert len(lines) == 5  # 2 epochs x 2 linear layers


def write_idx(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    n, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", data.IDX_MAGIC_IMAGES, n, h, w))
        fh.write(arr.tobytes())


class TestImagePipeline:
    def test_train_eval_sample_on_idx_images(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, size=(64, 8, 8)).astype(np.uint8)
        idx_path = tmp_path / "imgs.idx"
        write_idx(idx_path, imgs)
        train_args = [
            "train", "--model", "custom:conv:3,slrelu,squeeze,conv:1",
            "--data", f"idx:{idx_path}", "--mode", "snf", "--epochs", "1",
            "--batch", "16", "--lr", "1e-4", "--warmup", "0", "--seed", "0",
        ]
        assert run(train_args, tmp_path) == 0
        ckpt = tmp_path / "out" / "final.ckpt"
        eval_args = [
            "eval", "--checkpoint", str(ckpt), "--data", f"idx:{idx_path}",
            "--seed", "0", "--split", "test",
        ]
        assert run(eval_args, tmp_path) == 0
        assert "bits_per_dim=" in capsys.readouterr().out
        sample_args = [
            "sample", "--checkpoint", str(ckpt), "-n", "2", "--inverse", "exact",
            "--seed", "1",
        ]
        assert run(sample_args, tmp_path) == 0
        pgm = (tmp_path / "out" / "sample_000.pgm").read_bytes()
        assert pgm.startswith(b"P5\n8 8\n255\n")
        assert len(pgm) == len(b"P5\n8 8\n255\n") + 64
