import csv
import json

import numpy as np
import pytest

from attnlab.checkpoint import Checkpoint, save_checkpoint
from attnlab.cli import (
    EXIT_BADFILE, EXIT_FAIL, EXIT_NOFILE, EXIT_OK, EXIT_USAGE, FINETUNE_PRESETS, PRETRAIN_PRESETS, main,
)
from attnlab.model import ModelParams


def run(argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as e:  # argparse rejects bad values itself
        return e.code


def small_pretrain(out, *extra):
    return run(["pretrain", "--preset", "fig1-bottom", "--iters", 5, "--n", 30, "--report-n", 50,
                "--out", out, *extra])


class TestPresets:
    def test_fig1_values(self):
        top = PRETRAIN_PRESETS["fig1-top"]
        assert (top["n"], top["d"], top["D"], top["eta"], top["iters"]) == (500, 4, 6, 0.5, 400)
        bottom = PRETRAIN_PRESETS["fig1-bottom"]
        assert (bottom["n"], bottom["d"], bottom["D"]) == (200, 2, 4)
        assert PRETRAIN_PRESETS["growth"]["D"] == 16
        assert PRETRAIN_PRESETS["growth"]["mode"] == "population-mc"

    def test_fig4_values(self):
        f = FINETUNE_PRESETS["fig4"]
        assert (f["steps"], f["eta_tilde"], f["gamma"], f["sigma_tilde"]) == (400, 1e-3, 1.0, 1.0)


class TestPretrain:
    def test_outputs(self, tmp_path, capsys):
        assert small_pretrain(tmp_path) == EXIT_OK
        for name in ("metrics.csv", "checkpoint.gsat", "checkpoint.json", "report.json", "heatmap.csv"):
            assert (tmp_path / name).exists()
        assert "loss=" in capsys.readouterr().out

    def test_byte_identical_reruns(self, tmp_path):
        assert small_pretrain(tmp_path / "a") == EXIT_OK
        assert small_pretrain(tmp_path / "b") == EXIT_OK
        for name in ("metrics.csv", "checkpoint.gsat", "report.json", "heatmap.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_flag_overrides_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"iters": 3, "log_every": 1}))
        assert run(["pretrain", "--preset", "fig1-bottom", "--config", cfg, "--iters", 2, "--n", 20,
                    "--out", tmp_path / "o"]) == EXIT_OK
        with open(tmp_path / "o" / "metrics.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"learning_rate": 3}))
        assert run(["pretrain", "--config", cfg, "--out", tmp_path / "o"]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert run(["pretrain", "--config", tmp_path / "nope.json", "--out", tmp_path / "o"]) == EXIT_NOFILE

    def test_zero_eta_rejected(self, tmp_path):
        assert run(["pretrain", "--eta", 0, "--out", tmp_path]) == EXIT_USAGE

    def test_svg(self, tmp_path):
        assert small_pretrain(tmp_path, "--svg") == EXIT_OK
        assert (tmp_path / "loss.svg").read_text().startswith("<svg")
        assert (tmp_path / "heatmap.svg").exists()


class TestTheory:
    def test_zero_checkpoint_gives_uniform_heatmap(self, tmp_path):
        ck = Checkpoint.from_params(ModelParams.zeros(3, 5), 2, {"v_star": [0.0, 1.0, 0.0]})
        save_checkpoint(ck, tmp_path / "z.gsat")
        assert run(["theory", "--checkpoint", tmp_path / "z.gsat", "--eval-n", 20, "--out", tmp_path]) == EXIT_OK
        S = np.loadtxt(tmp_path / "heatmap.csv", delimiter=",")
        np.testing.assert_allclose(S, 0.2, atol=1e-15)
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["norm_v2"] == 0.0 and report["alpha"] == 0.0

    def test_missing_checkpoint(self, tmp_path):
        assert run(["theory", "--checkpoint", tmp_path / "none.gsat", "--out", tmp_path]) == EXIT_NOFILE

    def test_corrupt_checkpoint(self, tmp_path):
        (tmp_path / "bad.gsat").write_bytes(b"JUNKJUNKJUNK")
        assert run(["theory", "--checkpoint", tmp_path / "bad.gsat", "--out", tmp_path]) == EXIT_BADFILE

    def test_with_metrics(self, tmp_path):
        assert small_pretrain(tmp_path) == EXIT_OK
        assert run(["theory", "--checkpoint", tmp_path / "checkpoint.gsat", "--metrics", tmp_path / "metrics.csv",
                    "--eval-n", 30, "--out", tmp_path / "t"]) == EXIT_OK


class TestFinetune:
    def test_flat_with_zero_rate(self, tmp_path):
        assert small_pretrain(tmp_path) == EXIT_OK
        assert run(["finetune", "--checkpoint", tmp_path / "checkpoint.gsat", "--preset", "fig4", "--steps", 10,
                    "--test-n", 50, "--eta-tilde", 0, "--out", tmp_path / "f"]) == EXIT_OK
        with open(tmp_path / "f" / "finetune.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 10
        assert {r["test_accuracy"] for r in rows} == {"0.0"}

    def test_preset_dimension_mismatch(self, tmp_path):
        assert small_pretrain(tmp_path) == EXIT_OK  # d=2, D=4
        assert run(["finetune", "--checkpoint", tmp_path / "checkpoint.gsat", "--preset", "fig4-a",
                    "--out", tmp_path / "f"]) == EXIT_BADFILE

    def test_negative_rate(self, tmp_path):
        assert run(["finetune", "--checkpoint", tmp_path / "x.gsat", "--eta-tilde", -1,
                    "--out", tmp_path]) == EXIT_USAGE


class TestGradcheck:
    def test_passes(self, capsys):
        assert run(["gradcheck", "--trials", 3]) == EXIT_OK
        assert "finite differences" in capsys.readouterr().out

    def test_zero_trials(self):
        assert run(["gradcheck", "--trials", 0]) == EXIT_USAGE

    def test_sign_flip_is_caught(self, capsys):
        assert run(["gradcheck", "--trials", 2, "--inject-sign-flip"]) == EXIT_FAIL
        assert "invariant violated" in capsys.readouterr().out
