import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from badseg.cli import build_parser, main
from badseg.data import load_dataset, synthetic_taxonomy

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TINY = """\
name: cli_tiny
dataset: {n_train: 30, n_test: 8, n_aux: 8}
attack: {vector: O2B, victim: car, target: road}
trigger:
  fixed: {shape: square, size: 0.25, position: object_center, quantity: 1, intensity: 0.8}
training: {poison_rate: 0.2, epochs: 1, feature_channels: 8}
evaluation: {stealth_samples: 1, overlays: 1}
"""


@pytest.fixture
def tiny_yaml(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def test_validate_exit_codes(tmp_path, capsys):
    assert main(["validate", str(CONFIGS / "o2b_toy.yaml")]) == 0
    assert capsys.readouterr().out.strip().endswith("valid")
    bad = tmp_path / "bad.yaml"
    bad.write_text(TINY.replace("victim: car, target: road", "victim: road, target: car"))
    assert main(["validate", str(bad)]) == 1
    out = capsys.readouterr().out
    assert "victim must be object class" in out and out.strip().endswith("invalid")
    assert main(["validate", str(tmp_path / "missing.yaml")]) == 2
    assert "cannot read" in capsys.readouterr().err


def test_warning_only_config_is_valid(tmp_path, capsys):
    p = tmp_path / "w.yaml"
    p.write_text(TINY.replace("size: 0.25", "size: 0.3"))
    assert main(["validate", str(p)]) == 0
    assert "warning:" in capsys.readouterr().out


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["explode"])
    assert exc.value.code == 2


def test_make_synthetic(tmp_path, capsys):
    out = tmp_path / "ds"
    assert main(["make-synthetic", "--out", str(out), "-n", "3", "--seed", "5"]) == 0
    assert "wrote 3 samples" in capsys.readouterr().out
    samples = load_dataset(out, synthetic_taxonomy(4))
    assert len(samples) == 3 and samples[0].image.shape == (64, 64, 3)


def test_run_report_defend_and_rerun_from_record(tiny_yaml, tmp_path, capsys):
    run_dir = tmp_path / "r"
    assert main(["run", str(tiny_yaml), "-o", str(run_dir)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["status"] == "complete" and "checkpoint" in printed["artifacts"]

    assert main(["report", str(run_dir)]) == 0
    assert "| O2B | car | road |" in capsys.readouterr().out

    assert main(["defend", str(run_dir), "-d", "nonsense"]) == 2
    capsys.readouterr()
    assert main(["defend", str(run_dir), "-d", "prune"]) == 0
    assert "defense_prune_0" in json.loads(capsys.readouterr().out)

    # a run directory is itself a runnable config
    again = tmp_path / "again"
    assert main(["run", str(run_dir), "-o", str(again)]) == 0
    capsys.readouterr()
    assert (again / "eval_report.json").read_bytes() == (run_dir / "eval_report.json").read_bytes()


def test_run_invalid_config_exits_nonzero(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(TINY.replace("vector: O2B", "vector: O2X"))
    assert main(["run", str(p), "-o", str(tmp_path / "x")]) == 1
    assert "error:" in capsys.readouterr().err


def test_report_of_missing_run(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_sweep_and_rank_pairs(tmp_path, capsys):
    p = tmp_path / "s.yaml"
    p.write_text(TINY + "sweep:\n  training.poison_rate: [0.1, 0.2]\n")
    assert main(["sweep", str(p), "-o", str(tmp_path / "sw")]) == 0
    assert "# Sweep" in capsys.readouterr().out
    assert (tmp_path / "sw" / "summary.tsv").exists()

    r = tmp_path / "rk.yaml"
    d = yaml.safe_load(TINY)
    d["training"]["aux_fraction"] = 0.2
    d["surrogate"] = {"epochs": 1, "feature_channels": 8}
    r.write_text(yaml.safe_dump(d))
    assert main(["rank-pairs", str(r), "-o", str(tmp_path / "rk")]) == 0
    assert capsys.readouterr().out.startswith("rank\tclass_i\tclass_j\tdistance")


def test_optimize_trigger(tmp_path, capsys):
    d = yaml.safe_load(TINY)
    d["trigger"] = {"optimize": {"steps": 2, "batch_size": 2}}
    d["surrogate"] = {"epochs": 1, "feature_channels": 8}
    p = tmp_path / "o.yaml"
    p.write_text(yaml.safe_dump(d))
    assert main(["optimize-trigger", str(p), "-o", str(tmp_path / "o")]) == 0
    spec = yaml.safe_load(capsys.readouterr().out)["fixed"]
    assert set(spec) >= {"shape", "size", "position", "quantity", "intensity"}
    assert main(["optimize-trigger", str(CONFIGS / "o2b_toy.yaml"), "-o", str(tmp_path / "f")]) == 1


@pytest.mark.skipif(shutil.which("badseg") is None, reason="console script not installed")
def test_console_script_entry_point():
    proc = subprocess.run(["badseg", "validate", str(CONFIGS / "smoke.yaml")], capture_output=True, text=True)
    assert proc.returncode == 0 and "valid" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "badseg.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "make-synthetic" in proc.stdout
