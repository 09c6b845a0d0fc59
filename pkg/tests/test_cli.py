from __future__ import annotations

import json
import subprocess
import sys

import pytest

from hesplit.cli import main
from hesplit.neuralnet import load_checkpoint

TOY = ["--set", "crypto.params=\"toy\"", "--set", 'data={"kind":"synth","samples":40,"features":8}',
       "--set", "model.layer_sizes=[8,6,2]"]


@pytest.fixture(autouse=True)
def _cache(tmp_path, monkeypatch):
    monkeypatch.setenv("HESPLIT_CACHE", str(tmp_path / "cache"))


def test_dry_run_prints_the_estimate(capsys):
    assert main(["run", "--local", "--dry-run", *TOY]) == 0
    out = capsys.readouterr().out
    assert "recommendation: n = 1" in out and "ideal MB" in out


def test_baseline_with_zero_epochs(tmp_path, capsys):
    assert main(["baseline", "--epochs", "0", "--out-dir", str(tmp_path / "runs"), *TOY]) == 0
    (run,) = (tmp_path / "runs").iterdir()
    names = {p.name for p in run.iterdir()}
    assert {"config.json", "version.txt", "seeds.json", "machine.json", "metrics.jsonl", "summary.json",
            "model.ckpt"} <= names
    summary = json.loads((run / "summary.json").read_text())
    assert summary["epochs"] == 0 and summary["samples"] == 40
    assert len(load_checkpoint(run / "model.ckpt")[0]) == 2


def test_bench_writes_a_profile(tmp_path, capsys):
    assert main(["bench", "--reps", "10", "--cache-dir", str(tmp_path / "p"), *TOY]) == 0
    (prof,) = (tmp_path / "p").iterdir()
    assert json.loads(prof.read_text())["reps"] == 10
    assert "mul_ct / mul_scalar" in capsys.readouterr().out


def test_local_run_and_estimate_output(tmp_path, capsys):
    argv = ["local", "--backend", "noise-sim", "--epochs", "2", "--batch-size", "10", "--out-dir", str(tmp_path), *TOY]
    assert main(argv) == 0
    (run,) = [p for p in tmp_path.iterdir() if p.name.endswith("-local")]
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["role"] == "local"
    assert 0 <= json.loads((run / "summary.json").read_text())["train_accuracy"] <= 1
    assert main(["estimate", "--out-dir", str(tmp_path / "est"), *TOY]) == 0
    assert json.loads((tmp_path / "est" / "estimate.json").read_text())["recommendation"]["split_index"] == 1


def test_errors_exit_with_status_two(capsys):
    assert main(["baseline", "--set", "protocol.nope=1"]) == 2
    assert main(["run", "--role", "client", "--set", "protocol.batch_size=0"]) == 2
    assert "error:" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "hesplit", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
