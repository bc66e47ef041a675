"""Stage manifests: hashing, seed derivation, dependency checks, no-op reruns."""

import hashlib
import json
import shutil

import numpy as np
import pytest

from bitraj import data, learners, stages
from bitraj.config import from_dict
from bitraj.stages import Cell, StageError, Workspace, derive_seed, file_sha256

from conftest import tiny_config_dict


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, tiny_cfg):
    """Full tiny pipeline: shared stages plus one bidirectional and one base cell."""
    root = tmp_path_factory.mktemp("pipeline")
    ws = Workspace(root, tiny_cfg)
    stages.run_stage(ws, "collect")
    stages.run_stage(ws, "train-diffusion")
    stages.run_stage(ws, "train-completion")
    bi = Cell("bidirectional", 0)
    for stage in ("generate", "filter", "augment", "eval", "metrics"):
        stages.run_stage(ws, stage, bi)
    base = Cell("base", 0)
    stages.run_stage(ws, "augment", base)
    stages.run_stage(ws, "eval", base)
    return ws


def test_derive_seed_pure_and_stage_dependent():
    assert derive_seed(0, "collect") == derive_seed(0, "collect")
    assert derive_seed(0, "collect") != derive_seed(1, "collect")
    assert derive_seed(0, "collect") != derive_seed(0, "train-diffusion")
    seeds = [derive_seed(5, name) for name in stages.STAGES]
    assert all(0 <= s < 2**31 for s in seeds)


def test_file_sha256_matches_hashlib(tmp_path):
    path = tmp_path / "blob.bin"
    path.write_bytes(b"abc" * 1000)
    assert file_sha256(path) == hashlib.sha256(b"abc" * 1000).hexdigest()


def test_collect_writes_dataset_and_manifest(pipeline):
    ws = pipeline
    assert ws.dataset_path.exists()
    manifest = ws.read_manifest("collect")
    assert manifest["stage"] == "collect"
    assert manifest["config_hash"] == ws.config_hash
    assert manifest["outputs"] == {"dataset.jsonl": file_sha256(ws.dataset_path)}
    assert manifest["info"]["n_trajectories"] == 6


def test_manifest_paths_are_relative(pipeline):
    ws = pipeline
    for mf in (ws.root / "manifests").glob("*.json"):
        record = json.loads(mf.read_text())
        for rel in record["outputs"]:
            assert not rel.startswith("/"), f"absolute path {rel} in {mf.name}"


def test_missing_upstream_named(tmp_path, tiny_cfg):
    ws = Workspace(tmp_path / "empty", tiny_cfg)
    with pytest.raises(StageError, match="train-diffusion"):
        stages.run_stage(ws, "train-diffusion")
    with pytest.raises(StageError, match="run collect first"):
        stages.run_stage(ws, "train-diffusion")


def test_generate_without_models_names_train_diffusion(tmp_path, tiny_cfg):
    ws = Workspace(tmp_path / "gen", tiny_cfg)
    stages.run_stage(ws, "collect")
    with pytest.raises(StageError, match="train-diffusion"):
        stages.run_stage(ws, "generate", Cell("bidirectional", 0))


def test_generate_without_completion_names_train_completion(tmp_path, tiny_cfg):
    ws = Workspace(tmp_path / "gen2", tiny_cfg)
    stages.run_stage(ws, "collect")
    stages.run_stage(ws, "train-diffusion")
    with pytest.raises(StageError, match="train-completion"):
        stages.run_stage(ws, "generate", Cell("bidirectional", 0))


def test_cell_artifacts_and_counts(pipeline):
    ws = pipeline
    cell = Cell("bidirectional", 0)
    generated = data.load_trajectories(ws.cell_dir(cell) / "generated.jsonl")
    kept = data.load_trajectories(ws.cell_dir(cell) / "filtered.jsonl")
    n = ws.cfg.generation.n_anchors
    assert len(generated) + ws.read_manifest("generate:bidirectional:s0")["info"][
        "n_failures"
    ] == n
    # every generated trajectory covers 2H-1 states -> 2H-2 transitions
    h = ws.cfg.diffusion.horizon
    assert all(len(t.transitions) == 2 * h - 2 for t in generated)
    assert len(kept) == ws.read_manifest("filter:bidirectional:s0")["info"]["n_kept"]
    assert len(kept) <= len(generated)
    aug = data.load_dataset(ws.cell_dir(cell) / "augmented.jsonl")
    assert aug.n_trajectories == 6 + len(kept)
    # synthetic trajectories are tagged by provenance
    assert sum(t.source == "generated" for t in aug.trajectories) == len(kept)


def test_augmented_keeps_original_normalization(pipeline):
    ws = pipeline
    original = data.load_dataset(ws.dataset_path)
    augmented = data.load_dataset(ws.cell_dir(Cell("bidirectional", 0)) / "augmented.jsonl")
    assert augmented.stats == original.stats


def test_eval_manifest_reports_results(pipeline):
    ws = pipeline
    manifest = ws.read_manifest("eval:bidirectional:s0")
    res = manifest["info"]["results"]["bc"]
    assert 0.0 <= res["success_rate"] <= 1.0
    assert res["episodes"] == ws.cfg.evaluation.episodes
    assert (ws.cell_dir(Cell("bidirectional", 0)) / "policy-bc.json").exists()


def test_metrics_csv_rows_match_generated(pipeline):
    ws = pipeline
    cell = Cell("bidirectional", 0)
    generated = data.load_trajectories(ws.cell_dir(cell) / "generated.jsonl")
    lines = (ws.cell_dir(cell) / "metrics.csv").read_text().strip().splitlines()
    assert len(lines) - 1 == len(generated)
    kept_flags = [int(line.split(",")[3]) for line in lines[1:]]
    assert sum(kept_flags) == ws.read_manifest("filter:bidirectional:s0")["info"]["n_kept"]


def test_base_mode_equals_plain_training(pipeline):
    ws = pipeline
    from bitraj import envs

    spec = envs.get_spec(ws.cfg.env)
    dataset = data.load_dataset(ws.dataset_path)
    lrn = ws.cfg.learner
    cfg = learners.LearnerConfig(
        hidden=tuple(lrn.hidden),
        steps=lrn.steps,
        batch_size=lrn.batch_size,
        lr=lrn.lr,
        bc_weight=lrn.bc_weight,
        discount=lrn.discount,
    )
    seed = derive_seed(ws.cfg.master_seed, "eval:bc:s0")
    expected = learners.train_policy(
        dataset, "bc", spec.action_low, spec.action_high, cfg, seed=seed
    )
    stored = learners.load_policy(ws.cell_dir(Cell("base", 0)) / "policy-bc.json")
    assert all(
        np.array_equal(a, b) for a, b in zip(expected.actor.weights, stored.actor.weights)
    )
    assert all(
        np.array_equal(a, b) for a, b in zip(expected.actor.biases, stored.actor.biases)
    )


def test_base_mode_has_no_generate_or_filter(pipeline):
    ws = pipeline
    with pytest.raises(StageError, match="base"):
        stages.run_stage(ws, "generate", Cell("base", 0))
    with pytest.raises(StageError, match="base"):
        stages.run_stage(ws, "filter", Cell("base", 0))


def test_rerun_is_noop_and_force_reruns(pipeline, tmp_path):
    ws = pipeline
    copy_root = tmp_path / "copy"
    shutil.copytree(ws.root, copy_root)
    ws2 = Workspace(copy_root, ws.cfg)
    before = ws2.read_manifest("train-diffusion")
    again = stages.run_stage(ws2, "train-diffusion")
    assert again == before, "unchanged inputs must be a no-op"
    forced = stages.run_stage(ws2, "train-diffusion", force=True)
    assert forced["timestamps"]["started"] != before["timestamps"]["started"]
    stripped = {k: v for k, v in forced.items() if k != "timestamps"}
    assert stripped == {k: v for k, v in before.items() if k != "timestamps"}


def test_changed_input_invalidates_manifest(pipeline, tmp_path):
    ws = pipeline
    copy_root = tmp_path / "tamper"
    shutil.copytree(ws.root, copy_root)
    ws2 = Workspace(copy_root, ws.cfg)
    dataset = data.load_dataset(ws2.dataset_path)
    data.save_dataset(
        data.OfflineDataset(dataset.trajectories[:4], dataset.stats, dataset.env_name),
        ws2.dataset_path,
    )
    before = ws2.read_manifest("train-diffusion")
    after = stages.run_stage(ws2, "train-diffusion")
    assert after["timestamps"]["started"] != before["timestamps"]["started"]
    assert after["inputs"] != before["inputs"]


def test_unknown_stage_and_missing_cell(pipeline):
    with pytest.raises(StageError, match="unknown stage"):
        stages.run_stage(pipeline, "deploy")
    with pytest.raises(StageError, match="cell"):
        stages.run_stage(pipeline, "generate")
