import json
import os
import subprocess
import sys

import numpy as np
import pytest

from fforge.backbone import load_checkpoint
from fforge.cli import main
from fforge.config import RunConfig, load_config, parse_assignment
from fforge.data import SplitManifest, load_dataset
from fforge.errors import InvalidConfigError

SMALL = {
    "backbone.blocks": [[4, 1], [6, 1], [8, 1], [8, 1]],
    "train": {"epochs": 2, "iters_per_epoch": 3, "batch_size": 8, "base_holdout": 4},
    "episodes.num_tasks": 5,
    "episodes.queries": 5,
    "lrl.epochs": 4,
    "lrl.decay_epochs": [1, 2, 3],
}


class TestConfig:
    def test_unknown_keys_rejected(self):
        cfg = RunConfig()
        for key in ("train.nope", "nope.epochs", "train", "train."):
            with pytest.raises(InvalidConfigError):
                cfg.set(key, 1)

    def test_coercion(self):
        cfg = RunConfig()
        cfg.set("train.epochs", "7")
        cfg.set("train.weight_decay", 0)
        cfg.set("train.kl_enabled", "false")
        cfg.set("lrl.lr", None)
        cfg.set("backbone.branch_points", [1, 2])
        assert cfg.train.epochs == 7 and isinstance(cfg.train.weight_decay, float)
        assert cfg.train.kl_enabled is False and cfg.lrl.lr is None
        assert cfg.backbone.branch_points == (1, 2)
        with pytest.raises(InvalidConfigError):
            cfg.set("train.epochs", 2.5)
        with pytest.raises(InvalidConfigError):
            cfg.set("train.dropout_mode", 3)

    def test_hash_tracks_content(self):
        a, b = RunConfig(), RunConfig()
        assert a.config_hash() == b.config_hash() and len(a.config_hash()) == 16
        b.set("train.seed", 1)
        assert a.config_hash() != b.config_hash()

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"epochs": 3, "seed": 4}}))
        cfg = load_config(path, ["train.epochs=5", "train.dropout_mode=cutout"])
        assert (cfg.train.epochs, cfg.train.seed, cfg.train.dropout_mode) == (5, 4, "cutout")

    def test_parse_assignment(self):
        assert parse_assignment("a.b=[1, 2]") == ("a.b", [1, 2])
        assert parse_assignment("a.b=selfmix") == ("a.b", "selfmix")
        with pytest.raises(InvalidConfigError):
            parse_assignment("novalue")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.json").write_text(json.dumps(SMALL))
    code = main(["gen-data", "--out", str(root / "d.fsd"), "--classes", "24", "--per-class", "24",
                 "--set", "synth.height=16", "--set", "synth.width=16"])
    assert code == 0
    return root


def _train(ws, name, *extra):
    return main(["train", "--data", str(ws / "d.fsd"), "--manifest", str(ws / "d.manifest"),
                 "--out", str(ws / f"{name}.ffw"), "--config", str(ws / "small.json"), "--quiet", *extra])


def _records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestCli:
    def test_gen_data_layout(self, workspace):
        ds = load_dataset(workspace / "d.fsd")
        assert (workspace / "d.fsd").stat().st_size == 20 + 24 * 24 * (4 + 3 * 16 * 16)
        m = SplitManifest.load(workspace / "d.manifest")
        assert (len(m.base), len(m.val), len(m.novel)) == (15, 3, 6)
        assert ds.class_count == 24

    def test_gen_data_deterministic(self, workspace, tmp_path):
        main(["gen-data", "--out", str(tmp_path / "e.fsd"), "--classes", "24", "--per-class", "24",
              "--set", "synth.height=16", "--set", "synth.width=16"])
        assert (tmp_path / "e.fsd").read_bytes() == (workspace / "d.fsd").read_bytes()

    def test_gen_data_rejects_zero_classes(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "z.fsd"), "--classes", "0"]) == 2

    def test_usage_errors(self, workspace, tmp_path):
        assert main(["train"]) == 2
        assert main(["train", "--data", str(workspace / "d.fsd"), "--manifest", str(workspace / "d.manifest"),
                     "--out", str(tmp_path / "x.ffw"), "--set", "train.bogus=1"]) == 2
        bad = tmp_path / "bad.manifest"
        bad.write_text("[base]\n0\n1\n[novel]\n99\n")
        assert main(["train", "--data", str(workspace / "d.fsd"), "--manifest", str(bad),
                     "--out", str(tmp_path / "x.ffw")]) == 2

    def test_train_then_eval(self, workspace, capsys):
        assert _train(workspace, "m", "--eval-tasks", "3") == 0
        records = _records(workspace / "m.jsonl")
        summary = records[-1]
        assert summary["summary"] and summary["kl_pairs"] == 6 and summary["num_classifiers"] == 3
        assert len(summary["loss_trace"]) == 6 and "novel_accuracy" in summary
        net, extra = load_checkpoint(workspace / "m.ffw")
        assert extra["config_hash"] == summary["config_hash"]
        capsys.readouterr()
        out = workspace / "eval.jsonl"
        assert main(["eval", "--checkpoint", str(workspace / "m.ffw"), "--data", str(workspace / "d.fsd"),
                     "--manifest", str(workspace / "d.manifest"), "--config", str(workspace / "small.json"),
                     "--shot", "1", "--out", str(out)]) == 0
        rec = _records(out)[-1]
        assert rec["n_way"] == 5 and rec["num_tasks"] == 5 and rec["lrl"] is False
        assert 0 <= rec["mean"] <= 1
        assert main(["eval", "--checkpoint", str(workspace / "m.ffw"), "--data", str(workspace / "d.fsd"),
                     "--manifest", str(workspace / "d.manifest"), "--config", str(workspace / "small.json"),
                     "--tasks", "2", "--lrl", "--gamma", "0.5", "--out", str(out)]) == 0
        rec = _records(out)[-1]
        assert rec["lrl"] and rec["gamma"] == 0.5 and rec["epochs"] == 4 and rec["lr"] == 0.01

    def test_no_kl_and_ncls(self, workspace):
        assert _train(workspace, "nokl", "--no-kl", "--epochs", "1") == 0
        summary = _records(workspace / "nokl.jsonl")[-1]
        assert summary["num_classifiers"] == 1 and summary["kl_pairs"] == 0
        assert _train(workspace, "n4", "--ncls", "4", "--epochs", "1") == 0
        assert _records(workspace / "n4.jsonl")[-1]["kl_pairs"] == 12

    def test_eval_shape_mismatch(self, workspace, tmp_path):
        main(["gen-data", "--out", str(tmp_path / "big.fsd"), "--classes", "24", "--per-class", "24"])
        assert main(["eval", "--checkpoint", str(workspace / "m.ffw"), "--data", str(tmp_path / "big.fsd"),
                     "--manifest", str(tmp_path / "big.manifest")]) == 2

    def test_ablate(self, workspace, tmp_path, capsys):
        assert main(["ablate", "--data", str(workspace / "d.fsd"), "--manifest", str(workspace / "d.manifest"),
                     "--config", str(workspace / "small.json"), "--set", "train.epochs=1", "--axis", "ncls",
                     "--tasks", "2", "--out-dir", str(tmp_path)]) == 0
        rows = _records(tmp_path / "ablation.jsonl")
        assert [r["variant"] for r in rows] == ["ncls=1", "ncls=2", "ncls=3", "ncls=4"]
        assert all(np.isfinite(r["final_loss"]) for r in rows)
        assert "variant" in capsys.readouterr().out

    def test_eval_ensemble(self, workspace):
        args = ["eval", "--checkpoint", str(workspace / "m.ffw"), "--data", str(workspace / "d.fsd"),
                "--manifest", str(workspace / "d.manifest"), "--config", str(workspace / "small.json"),
                "--ensemble"]
        assert main(args) == 0
        assert main(args + ["--lrl"]) == 2

    def test_augment_preview(self, workspace, tmp_path):
        out = tmp_path / "grid.ppm"
        assert main(["augment-preview", "--data", str(workspace / "d.fsd"), "--count", "3",
                     "--out", str(out)]) == 0
        assert out.read_bytes().startswith(b"P6\n")


def test_selfcheck_passes_and_detects_faults():
    assert main(["selfcheck", "--quick"]) == 0
    env = dict(os.environ, FFORGE_INJECT_FAULT="leaky_sign")
    proc = subprocess.run([sys.executable, "-m", "fforge.cli", "selfcheck", "--quick"], env=env,
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 1, proc.stdout + proc.stderr
