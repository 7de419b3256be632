import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from eaekit import cli
from eaekit.attacks import PerturbedBatch
from eaekit.config import parse_config

BLOBS = {"kind": "gaussian-blobs", "num_classes": 3, "n": 240, "dim": 3, "noise": 0.5}


def write_config(tmp_path, name="run.json", **sections):
    doc = {"seed": 0, "dataset": BLOBS, "model": "mlp-small"}
    doc.update(sections)
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2))
    return path


def run(path, command="train", out=None, *extra):
    argv = [command, "--config", str(path)]
    if out is not None:
        argv += ["--out", str(out)]
    return cli.main(argv + list(extra))


TRAIN_NORMAL = {"method": "normal", "epochs": 3, "batch_size": 32, "clr_max": 0.05}


class TestTrain:
    def test_outputs(self, tmp_path):
        cfg = write_config(tmp_path, train=TRAIN_NORMAL)
        assert run(cfg, "train", tmp_path / "o") == 0
        for name in ("model.ckpt", "report.json", "report.csv", "metrics.csv"):
            assert (tmp_path / "o" / name).exists()
        report = json.loads((tmp_path / "o" / "report.json").read_text())[0]
        assert report["method"] == "normal" and 0 <= report["clean_acc"] <= 1
        assert report["instrumentation"]["input_grad_passes"] == 0
        assert len(list(csv.DictReader(open(tmp_path / "o" / "metrics.csv")))) == 3

    def test_eae_without_gamma(self, tmp_path, capsys):
        cfg = write_config(tmp_path, train={"method": "eae", "epochs": 1, "batch_size": 32})
        assert run(cfg, "train", tmp_path / "o") == 2
        err = capsys.readouterr().err
        assert "train.gamma" in err and "line" in err

    def test_deterministic(self, tmp_path):
        cfg = write_config(
            tmp_path,
            train={"method": "eae", "epochs": 2, "batch_size": 32, "clr_max": 0.05, "gamma": 3.0},
            attacks=[{"kind": "fgsm", "epsilon": 0.05}],
            evaluation={"source_epochs": 2},
        )
        docs = []
        for sub in ("a", "b"):
            assert run(cfg, "train", tmp_path / sub) == 0
            doc = json.loads((tmp_path / sub / "report.json").read_text())[0]
            doc.pop("sec_per_epoch")
            doc["instrumentation"].pop("wall_time_per_epoch")
            docs.append(doc)
            assert (tmp_path / sub / "model.ckpt").read_bytes() == (tmp_path / "a" / "model.ckpt").read_bytes()
        assert docs[0] == docs[1]
        assert "fgsm,eps=0.05" in docs[0]["perturbed_acc"]

    def test_seed_override(self, tmp_path):
        cfg = write_config(tmp_path, train=TRAIN_NORMAL)
        assert run(cfg, "train", tmp_path / "a") == 0
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "5"]) == 0
        assert (tmp_path / "a" / "model.ckpt").read_bytes() != (tmp_path / "b" / "model.ckpt").read_bytes()

    def test_nan_exit(self, tmp_path, capsys):
        cfg = write_config(tmp_path, train=dict(TRAIN_NORMAL, clr_max=1e100))
        assert run(cfg, "train", tmp_path / "o") == 3
        assert "clr_max" in capsys.readouterr().err


class TestConfigErrors:
    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, train=dict(TRAIN_NORMAL, momentum=0.9))
        assert run(cfg, "train", tmp_path / "o") == 2
        assert "train.momentum" in capsys.readouterr().err

    def test_bad_json_reports_line(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "seed": 0,\n  "model": "mlp-small"\n  "dataset": {}\n}\n')
        assert run(path, "train", tmp_path / "o") == 2
        assert "line 4" in capsys.readouterr().err

    def test_missing_dataset_path(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"dataset": {"kind": "cifar10", "path": str(tmp_path / "nope")}, "model": "cnn-small"}))
        assert run(path, "bench", tmp_path / "o") == 2
        assert "dataset.path" in capsys.readouterr().err

    def test_bad_attack(self, tmp_path):
        cfg = write_config(tmp_path, train=TRAIN_NORMAL, attacks=[{"kind": "fgsm", "epsilon": 2.0}])
        assert run(cfg, "train", tmp_path / "o") == 2


class TestSeedStats:
    def test_records(self, tmp_path):
        cfg = write_config(
            tmp_path,
            train={"method": "normal", "epochs": 8, "batch_size": 32, "clr_max": 0.1},
            attacks=[{"kind": "fgsm", "epsilon": e} for e in (0.0, 0.05, 0.15)],
        )
        assert run(cfg, "seed-stats", tmp_path / "o") == 0
        records = json.loads((tmp_path / "o" / "seed_stats.json").read_text())["records"]
        assert [r["epsilon"] for r in records] == [0.0, 0.05, 0.15]
        zero = records[0]
        assert zero["n_seed"] == 0 and zero["warning"] and zero["gamma"] is None
        for r in records[1:]:
            assert r["n_seed"] + r["n_non_seed"] == r["candidates"]
            assert r["n_seed"] > 0 and r["gamma"] == pytest.approx(r["mld_seed"])
        assert (tmp_path / "o" / "ld_hist.svg").exists()

    def test_from_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path, train=TRAIN_NORMAL)
        assert run(cfg, "train", tmp_path / "t") == 0
        cfg2 = write_config(
            tmp_path, "stats.json", checkpoint=str(tmp_path / "t" / "model.ckpt"), attacks=[{"kind": "fgsm", "epsilon": 0.1}]
        )
        assert run(cfg2, "seed-stats", tmp_path / "s") == 0


class TestBench:
    def test_four_methods(self, tmp_path, capsys):
        methods = [
            {"method": "normal", "epochs": 2, "batch_size": 32, "clr_max": 0.05},
            {"method": "eae", "epochs": 2, "batch_size": 32, "clr_max": 0.05, "gamma": 3.0},
            {"method": "fgsm-at", "epochs": 2, "batch_size": 32, "clr_max": 0.05, "attack": {"kind": "fgsm", "epsilon": 0.05}},
            {
                "method": "pgd-at",
                "epochs": 2,
                "batch_size": 32,
                "clr_max": 0.05,
                "attack": {"kind": "pgd", "epsilon": 0.05, "alpha": 0.025, "iterations": 7, "random_start": True},
            },
        ]
        cfg = write_config(tmp_path, bench={"methods": methods}, attacks=[{"kind": "fgsm", "epsilon": 0.05}])
        assert run(cfg, "bench", tmp_path / "o") == 0
        rows = list(csv.DictReader(open(tmp_path / "o" / "timing.csv")))
        assert [r["method"] for r in rows] == ["normal", "eae", "fgsm-at", "pgd-at"]
        by = {r["method"]: r for r in rows}
        assert by["eae"]["input_grad_bwd"] == "0"
        assert int(by["pgd-at"]["input_grad_bwd"]) == 7 * int(by["fgsm-at"]["input_grad_bwd"])
        assert (tmp_path / "o" / "summary.svg").exists()
        bench = list(csv.DictReader(open(tmp_path / "o" / "bench.csv")))
        assert len(bench) == 4 and all(r["attack"] == "fgsm,eps=0.05" for r in bench)


class TestAttack:
    @pytest.fixture
    def checkpoint_cfg(self, tmp_path):
        cfg = write_config(tmp_path, train=TRAIN_NORMAL)
        assert run(cfg, "train", tmp_path / "t") == 0
        return write_config(
            tmp_path, "atk.json", checkpoint=str(tmp_path / "t" / "model.ckpt"), attacks=[{"kind": "fgsm", "epsilon": 0.05}]
        )

    def test_writes_set(self, tmp_path, checkpoint_cfg, capsys):
        assert run(checkpoint_cfg, "attack", tmp_path / "a") == 0
        assert "success_rate=" in capsys.readouterr().out
        with np.load(tmp_path / "a" / "perturbed_00_fgsm.npz") as f:
            assert f["x_adv"].shape[0] == f["labels"].shape[0] and float(f["epsilon"]) == 0.05

    def test_verify_and_determinism(self, tmp_path, checkpoint_cfg):
        assert run(checkpoint_cfg, "attack", tmp_path / "a", "--verify") == 0
        assert run(checkpoint_cfg, "attack", tmp_path / "b", "--verify") == 0
        with np.load(tmp_path / "a" / "perturbed_00_fgsm.npz") as a, np.load(tmp_path / "b" / "perturbed_00_fgsm.npz") as b:
            assert a["x_adv"].tobytes() == b["x_adv"].tobytes()

    def test_violation_exit(self, tmp_path, checkpoint_cfg, monkeypatch, capsys):
        def broken(model, inputs, labels, spec, batch_size=256):
            return PerturbedBatch(np.clip(inputs + 2 * spec.epsilon, 0, 1), np.zeros(len(labels), bool))

        monkeypatch.setattr(cli, "attack_dataset", broken)
        assert run(checkpoint_cfg, "attack", tmp_path / "a", "--verify") == 4
        assert "epsilon-ball" in capsys.readouterr().err

    def test_needs_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path, attacks=[{"kind": "fgsm", "epsilon": 0.05}])
        assert run(cfg, "attack", tmp_path / "a") == 2


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path, train={"method": "normal", "epochs": 1, "batch_size": 64, "clr_max": 0.05})
    proc = subprocess.run(
        [sys.executable, "-m", "eaekit", "train", "--config", str(cfg), "--out", str(tmp_path / "o")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "clean_acc" in proc.stdout


@pytest.mark.parametrize("name", ["blobs-eae.json", "seed-stats.json", "bench-cifar.json"])
def test_shipped_configs_parse(name, tmp_path):
    doc = json.loads((Path(__file__).parent.parent / "configs" / name).read_text())
    if doc["dataset"]["kind"] == "cifar10":
        doc["dataset"]["path"] = str(tmp_path)
    cfg = parse_config(doc)
    assert cfg.attacks
