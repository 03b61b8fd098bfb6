from __future__ import annotations

import subprocess
import sys

import pytest

from geocsp.cli import main

TINY = ["--set", "n_classes=3", "--set", "feature_dim=4", "--set", "n_train=80", "--set", "n_eval=40",
        "--set", "n_scales=2", "--set", "hidden_units=8", "--set", "embed_dim=4", "--set", "pretrain_epochs=1",
        "--set", "finetune_epochs=1", "--set", "head_epochs=2", "--set", "batch_size=16"]


def test_stage_by_stage(tmp_path, capsys):
    d = tmp_path
    assert main(["gen-data", *TINY, "--out", str(d / "data")]) == 0
    assert main(["pretrain", *TINY, "--data", str(d / "data/train.txt"), "--model", "csp-mc-bld", "--out", str(d / "pre")]) == 0
    assert main(["finetune", *TINY, "--data", str(d / "data/train.txt"), "--checkpoint", str(d / "pre/pretrain.ckpt"),
                 "--ratio", "50", "--out", str(d / "ft")]) == 0
    assert main(["finetune", *TINY, "--out", str(d / "sup")]) == 0
    assert main(["eval", *TINY, "--checkpoint", str(d / "ft/finetune.ckpt"), "--data", str(d / "data/eval.txt"),
                 "--out", str(d / "ev")]) == 0
    assert "combined_top1 = " in (d / "ev/eval.report").read_text()
    assert main(["export-grid", *TINY, "--checkpoint", str(d / "ft/finetune.ckpt"), "--resolution", "30",
                 "--out", str(d / "grid")]) == 0
    assert main(["cluster", "--table", str(d / "grid/grid_embeddings.txt"), "--k", "3", "--out", str(d / "cl")]) == 0
    rows = [l for l in (d / "cl/clusters.txt").read_text().splitlines() if not l.startswith("#")]
    assert len(rows) == 72 and {r.split()[2] for r in rows} <= {"0", "1", "2"}


def test_seed_flag_gives_identical_reports(tmp_path):
    for name in ("a", "b"):
        assert main(["run-experiment", *TINY, "--set", "models=sup-only-grid,csp-mc-b", "--seed", "7",
                     "--out", str(tmp_path / name)]) == 0
    for report in (tmp_path / "a").glob("*.report"):
        assert report.read_bytes() == (tmp_path / "b" / report.name).read_bytes()


def test_malformed_config_leaves_no_output(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("n_classes = three\n")
    assert main(["run-experiment", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 1
    assert not (tmp_path / "out").exists()
    assert "ConfigError" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["cluster", "--table", "missing.txt", "--k", "2", "--out", "x"],
        ["export-grid", "--checkpoint", "missing.ckpt", "--out", "x"],
        ["pretrain", "--set", "bogus=1", "--out", "x"],
    ],
)
def test_errors_exit_nonzero(tmp_path, argv, capsys):
    argv = [a if a != "x" else str(tmp_path / "x") for a in argv]
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_subcommand_via_console_script():
    proc = subprocess.run([sys.executable, "-m", "geocsp.cli", "fly"], capture_output=True, text=True)
    assert proc.returncode != 0 and "invalid choice" in proc.stderr
