import json
import subprocess
import sys

import numpy as np
import pytest

from pushfuse.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main

TINY = {
    "name": "cli_tiny",
    "episode_horizon": 20,
    "window_k": 4,
    "ensemble_n": 2,
    "trials": 2,
    "seeds": [0],
    "ablation_trials": 2,
    "ablation_rungs": [[0.06, 0.01]],
    "budget": {
        "num_envs": 4, "rollout_steps": 8, "phase1_updates": 1, "phase15_updates": 1,
        "dr_updates": 1, "ensemble_episodes": 4, "ensemble_epochs": 1, "ensemble_batch": 32,
        "policy_hidden": [8, 8], "ensemble_hidden": [16], "ang_anneal_frac": 0.0,
    },
    "ppo": {"minibatch": 64},
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return path


def test_full_cli_pipeline(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    for cmd in ("train-phase1", "finetune", "train-adapters", "evaluate", "ablation", "export-cdf"):
        code = main([cmd, "--config", str(tiny_config), "--seed", "0", "--out", str(out)])
        captured = capsys.readouterr()
        assert code == EXIT_OK, f"{cmd} failed: {captured.err}"
        assert "wrote " in captured.out
    assert (out / "checkpoints" / "phase1.json").exists()
    assert (out / "checkpoints" / "phase15.json").exists()
    assert (out / "checkpoints" / "ensemble.json").exists()
    assert (out / "metrics" / "evaluate_fused_seed0.json").exists()
    assert (out / "metrics" / "cdf_fused_seed0.csv").exists()
    assert (out / "metrics" / "ablation.json").exists()
    assert (out / "traces" / "evaluate_fused_seed0.jsonl").exists()


def test_missing_config_file_exits_2(tmp_path, capsys):
    code = main(["train-phase1", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{broken")
    code = main(["evaluate", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY, "warp_drive": True}))
    code = main(["train-phase1", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    assert "warp_drive" in capsys.readouterr().err


def test_evaluate_without_checkpoints_exits_2(tiny_config, tmp_path, capsys):
    code = main(["evaluate", "--config", str(tiny_config), "--out", str(tmp_path / "empty_run")])
    assert code == EXIT_CONFIG
    assert "evaluation needs" in capsys.readouterr().err


def test_export_cdf_without_metrics_exits_2(tiny_config, tmp_path, capsys):
    code = main(["export-cdf", "--config", str(tiny_config), "--out", str(tmp_path / "empty_run")])
    assert code == EXIT_CONFIG
    capsys.readouterr()


def test_bad_arguments_exit_2(capsys):
    assert main([]) == EXIT_CONFIG
    assert main(["train-phase1"]) == EXIT_CONFIG  # missing --config/--out
    assert main(["not-a-command", "--config", "x", "--out", "y"]) == EXIT_CONFIG
    capsys.readouterr()


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "train-phase1" in capsys.readouterr().out


def test_divergent_simulation_exits_3_with_diagnostics(tmp_path, capsys):
    # an absurd contact stiffness overflows the integrator on first touch
    doc = {**TINY, "sim": {"k_n": 1e300}}
    cfg = tmp_path / "explode.json"
    cfg.write_text(json.dumps(doc))
    out = tmp_path / "run"
    with np.errstate(all="ignore"):
        code = main(["train-phase1", "--config", str(cfg), "--seed", "0", "--out", str(out)])
    assert code == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err
    diag = (out / "diagnostics.txt").read_text()
    assert "SimulationDiverged" in diag


def test_module_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "pushfuse.cli", "--help"],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0
    assert "evaluate" in proc.stdout
