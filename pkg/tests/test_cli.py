import csv
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from deepthink import cli, mazes, models, records
from deepthink.evaluation import ExitRule, evaluate
from deepthink.models import ModelSpec, build_model


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset and a random recurrent checkpoint shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    ds = mazes.build_dataset(4, 6, 3)
    mazes.write_dataset(ds, root / "mazes.dtmz")
    mazes.write_dataset(mazes.build_dataset(5, 4, 90), root / "bigger.dtmz")
    model = build_model(ModelSpec("maze_residual", 8, 3), 1)
    models.save_checkpoint(model, root / "model.dtck")
    return root


class TestGenerate:
    def test_count_one(self, tmp_path):
        assert cli.main(["generate", "--size", "custom:4", "--count", "1", "--seed", "5", "--out", str(tmp_path)]) == 0
        ds = mazes.read_dataset(tmp_path / "custom4.dtmz")
        assert len(ds) == 1 and ds.n == 4
        np.testing.assert_array_equal(ds[0].image, mazes.make_sample(4, 5).image)

    def test_manifest(self, tmp_path):
        argv = ["generate", "--size", "small", "--count", "2", "--out", str(tmp_path)]
        cli.main(argv)
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["argv"] == argv and man["seeds"] == {"maze": 0}
        assert man["outputs"]["small.dtmz"] == cli.sha256_file(tmp_path / "small.dtmz")

    def test_preset_split_naming(self, tmp_path, monkeypatch):
        # shrink the preset split so the test stays fast
        monkeypatch.setattr(mazes, "PRESET_SPLIT", (3, 2))
        assert cli.main(["generate", "--size", "small", "--out", str(tmp_path)]) == 0
        assert len(mazes.read_dataset(tmp_path / "small_train.dtmz")) == 3
        assert len(mazes.read_dataset(tmp_path / "small_test.dtmz")) == 2

    @pytest.mark.parametrize("size", ["huge", "custom:0", "custom:x", "9"])
    def test_bad_size(self, tmp_path, size, capsys):
        assert cli.main(["generate", "--size", size, "--count", "1", "--out", str(tmp_path)]) == 1
        assert "--size" in capsys.readouterr().err

    def test_custom_needs_count(self, tmp_path):
        assert cli.main(["generate", "--size", "custom:5", "--out", str(tmp_path)]) == 1

    def test_refuses_overwrite_without_force(self, tmp_path, capsys):
        argv = ["generate", "--size", "custom:3", "--count", "1", "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        assert cli.main(argv) == 1
        assert "--force" in capsys.readouterr().err
        assert cli.main(argv + ["--force"]) == 0

    def test_output_root_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
        assert cli.main(["generate", "--size", "custom:3", "--count", "1", "--out", "rel"]) == 0
        assert (tmp_path / "rel" / "custom3.dtmz").exists()


class TestEval:
    def test_matches_library(self, workspace, tmp_path):
        argv = ["eval", "--checkpoint", str(workspace / "model.dtck"), "--data", str(workspace / "mazes.dtmz"),
                "--rule", "agreement", "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        row = read_csv(tmp_path / "eval.csv")[0]
        model = models.load_checkpoint(workspace / "model.dtck")
        rep = evaluate(model, mazes.read_dataset(workspace / "mazes.dtmz"), ExitRule("agreement", 3, 5))
        assert row["rule"] == "agreement" and row["budget"] == "5" and row["dataset"] == "mazes"
        assert float(row["accuracy"]) == pytest.approx(rep.accuracy, abs=1e-6)
        exits = {int(r["iteration"]): int(r["count"]) for r in read_csv(tmp_path / "exits.csv")}
        assert exits == {k: v for k, v in rep.exit_histogram.items() if v}

    def test_budget_below_train_iters(self, workspace, tmp_path):
        argv = ["eval", "--checkpoint", str(workspace / "model.dtck"), "--data", str(workspace / "mazes.dtmz"),
                "--rule", "baseline", "--budget", "2", "--out", str(tmp_path)]
        assert cli.main(argv) == 1

    def test_missing_checkpoint(self, workspace, tmp_path):
        argv = ["eval", "--checkpoint", str(tmp_path / "none.dtck"), "--data", str(workspace / "mazes.dtmz"),
                "--out", str(tmp_path)]
        assert cli.main(argv) == 2

    def test_corrupt_dataset(self, workspace, tmp_path):
        bad = tmp_path / "bad.dtmz"
        bad.write_bytes(b"XXXX" + (workspace / "mazes.dtmz").read_bytes()[4:])
        argv = ["eval", "--checkpoint", str(workspace / "model.dtck"), "--data", str(bad), "--out", str(tmp_path / "o")]
        assert cli.main(argv) == 2


class TestSweep:
    def test_thirty_rows_per_rule(self, workspace, tmp_path):
        argv = ["sweep", "--checkpoint", str(workspace / "model.dtck"),
                "--data", f"easy={workspace / 'mazes.dtmz'}", f"hard={workspace / 'bigger.dtmz'}",
                "--budgets", "1-30", "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        rows = read_csv(tmp_path / "sweep.csv")
        for name in ("easy", "hard"):
            for rule in ("last", "baseline", "n_plus_2", "agreement", "max_confidence"):
                budgets = [int(r["budget"]) for r in rows if r["dataset"] == name and r["rule"] == rule]
                assert budgets == list(range(1, 31))

    @pytest.mark.parametrize("budgets", ["", "0-3", "a-b"])
    def test_bad_budgets(self, workspace, tmp_path, budgets):
        argv = ["sweep", "--checkpoint", str(workspace / "model.dtck"), "--data", str(workspace / "mazes.dtmz"),
                "--budgets", budgets, "--out", str(tmp_path)]
        assert cli.main(argv) == 1

    def test_unknown_rule(self, workspace, tmp_path):
        argv = ["sweep", "--checkpoint", str(workspace / "model.dtck"), "--data", str(workspace / "mazes.dtmz"),
                "--rules", "patience", "--out", str(tmp_path)]
        assert cli.main(argv) == 1

    def test_budget_parser(self):
        assert cli.parse_budgets("1-3,8, 2") == [1, 2, 3, 8]


class TestTrainAndReplay:
    CONFIG = "optimizer=adam\nlearning_rate=0.001\nepochs=2\nbatch_size=3\nseed=4\nmodel.family=maze_residual\nmodel.width=4\nmodel.iterations=2\n"

    def test_train_then_replay(self, workspace, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(self.CONFIG)
        out = tmp_path / "run"
        assert cli.main(["train", "--config", str(cfg), "--data", str(workspace / "mazes.dtmz"), "--out", str(out)]) == 0
        hist = read_csv(out / "history.csv")
        assert [h["epoch"] for h in hist] == ["1", "2"]
        assert models.load_checkpoint(out / "model.dtck").spec.width == 4
        man = json.loads((out / "manifest.json").read_text())
        assert man["config"] == self.CONFIG and man["seeds"] == {"train": 4}
        assert cli.main(["replay", "--manifest", str(out / "manifest.json"), "--out", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again" / "model.dtck").read_bytes() == (out / "model.dtck").read_bytes()

    def test_replay_detects_mismatch(self, workspace, tmp_path):
        out = tmp_path / "g"
        cli.main(["generate", "--size", "custom:3", "--count", "2", "--out", str(out)])
        man_path = out / "manifest.json"
        man = json.loads(man_path.read_text())
        man["outputs"]["custom3.dtmz"] = "0" * 64
        man_path.write_text(json.dumps(man))
        assert cli.main(["replay", "--manifest", str(man_path)]) == 2

    def test_bad_config_is_data_error(self, workspace, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("speed=3\n")
        assert cli.main(["train", "--config", str(cfg), "--data", str(workspace / "mazes.dtmz"), "--out", str(tmp_path / "o")]) == 2

    def test_divergence_is_numeric_failure(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "hot.cfg"
        cfg.write_text(self.CONFIG.replace("optimizer=adam\nlearning_rate=0.001", "optimizer=sgd\nlearning_rate=1e30"))
        with np.errstate(over="ignore", invalid="ignore"):
            code = cli.main(["train", "--config", str(cfg), "--data", str(workspace / "mazes.dtmz"), "--out", str(tmp_path / "o")])
        assert code == 3
        assert "numeric failure" in capsys.readouterr().err


class TestAnalyzeAndIngest:
    def test_reuse(self, workspace, tmp_path):
        argv = ["analyze", "reuse", "--checkpoint", str(workspace / "model.dtck"),
                "--data", str(workspace / "mazes.dtmz"), "--iters", "4", "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        info = json.loads((tmp_path / "reuse.json").read_text())
        assert info["images"] == 6 and 0 <= info["reuse_fraction"] <= 1

    def test_thoughts(self, workspace, tmp_path):
        argv = ["analyze", "thoughts", "--checkpoint", str(workspace / "model.dtck"),
                "--data", str(workspace / "mazes.dtmz"), "--index", "2", "--format", "png", "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        assert sorted(p.name for p in tmp_path.glob("*.png")) == [
            "input.png", "iter_001.png", "iter_002.png", "iter_003.png", "target.png"]

    def test_thoughts_bad_index(self, workspace, tmp_path):
        argv = ["analyze", "thoughts", "--checkpoint", str(workspace / "model.dtck"),
                "--data", str(workspace / "mazes.dtmz"), "--index", "99", "--out", str(tmp_path)]
        assert cli.main(argv) == 1

    def test_ingest(self, tmp_path):
        ds = records.ClassificationDataset(np.array([3, 3, 9], np.uint8), np.zeros((3, 3, 32, 32), np.uint8))
        src = tmp_path / "batch.bin"
        records.write_records(ds, src)
        assert cli.main(["ingest", "--input", str(src), "--out", str(tmp_path / "o")]) == 0
        counts = {r["label"]: r["count"] for r in read_csv(tmp_path / "o" / "labels.csv")}
        assert counts["3"] == "2" and counts["9"] == "1" and counts["0"] == "0"
        assert (tmp_path / "o" / "records.bin").read_bytes() == src.read_bytes()

    def test_ingest_truncated(self, tmp_path, capsys):
        src = tmp_path / "short.bin"
        src.write_bytes(b"\x01" * 4000)
        assert cli.main(["ingest", "--input", str(src), "--out", str(tmp_path / "o")]) == 2
        assert "3073" in capsys.readouterr().err


class TestProcess:
    def test_missing_command(self):
        assert cli.main([]) == 1

    def test_threads_flag(self, tmp_path):
        assert cli.main(["--threads", "1", "generate", "--size", "custom:2", "--count", "1", "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "manifest.json").read_text())["argv"][0] == "generate"

    def test_console_script_exit_code(self, tmp_path):
        exe = shutil.which("deepthink")
        cmd = [exe] if exe else [sys.executable, "-m", "deepthink.cli"]
        res = subprocess.run(cmd + ["generate", "--size", "nope", "--out", str(tmp_path)], capture_output=True, text=True)
        assert res.returncode == 1 and "usage error" in res.stderr
