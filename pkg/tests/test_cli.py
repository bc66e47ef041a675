"""Command-line interface: exit codes, overrides, stage dispatch, run-all."""

import json

import pytest
import yaml

from bitraj import cli

from conftest import tiny_config_dict


@pytest.fixture()
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    raw = tiny_config_dict(out_dir=str(tmp_path / "run"))
    path.write_text(yaml.safe_dump(raw))
    return path


def test_invalid_config_exit_2_lists_fields(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"env": "nope", "generation": {"omega": -1}}))
    code = cli.main(["collect", "--config", str(path)])
    err = capsys.readouterr().err
    assert code == 2
    assert "env:" in err and "generation.omega:" in err


def test_collect_then_dependent_stage_error(tiny_yaml, capsys):
    assert cli.main(["collect", "--config", str(tiny_yaml)]) == 0
    code = cli.main(["generate", "--config", str(tiny_yaml), "--mode", "bidirectional"])
    err = capsys.readouterr().err
    assert code == 1
    assert "train-diffusion" in err


def test_stage_chain_and_manifest_output(tiny_yaml, tmp_path, capsys):
    for command in ("collect", "train-diffusion", "train-completion"):
        assert cli.main([command, "--config", str(tiny_yaml)]) == 0
    for command in ("generate", "filter", "augment", "eval", "metrics"):
        assert (
            cli.main([command, "--config", str(tiny_yaml), "--mode", "bidirectional"]) == 0
        )
    out = capsys.readouterr().out
    assert "metrics:bidirectional:s0: ok" in out
    run_dir = tmp_path / "run"
    assert (run_dir / "cells" / "bidirectional-s0" / "metrics.csv").exists()


def test_seed_override_changes_artifacts(tiny_yaml, tmp_path):
    assert cli.main(["collect", "--config", str(tiny_yaml)]) == 0
    alt = tmp_path / "alt"
    assert cli.main(["collect", "--config", str(tiny_yaml), "--seed", "9", "--out", str(alt)]) == 0
    a = (tmp_path / "run" / "dataset.jsonl").read_bytes()
    b = (alt / "dataset.jsonl").read_bytes()
    assert a != b


def test_env_var_override(tiny_yaml, tmp_path, monkeypatch):
    monkeypatch.setenv("BITRAJ_DATASET__EPISODES_A", "2")
    out = tmp_path / "envrun"
    assert cli.main(["collect", "--config", str(tiny_yaml), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifests" / "collect.json").read_text())
    assert manifest["info"]["n_trajectories"] == 2 + 3


def test_run_all_and_mode_restriction(tiny_yaml, tmp_path, capsys):
    out = tmp_path / "runall"
    assert (
        cli.main(
            ["run-all", "--config", str(tiny_yaml), "--out", str(out), "--mode", "bidirectional"]
        )
        == 0
    )
    summary = json.loads((out / "report" / "summary.json").read_text())
    assert summary["modes"] == ["bidirectional"]
    assert "bidirectional" in summary["policy"]
    assert "base" not in summary["policy"]


def test_missing_config_file_exit_2(capsys):
    code = cli.main(["collect", "--config", "/nonexistent/cfg.yaml"])
    assert code == 2
    assert "not found" in capsys.readouterr().err
