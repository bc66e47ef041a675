"""Pipeline stages with content-hashed JSON manifests.

Every stage writes its artifacts plus a manifest recording the config hash,
the derived seed, and SHA-256 hashes of inputs and outputs. Re-running a
stage whose manifest still matches its inputs is a no-op unless forced. All
randomness flows from the master seed through ``derive_seed``; paths inside
manifests are relative to the run directory so identical runs in different
directories produce identical manifests (timestamps aside).

Stage graph::

    collect -> train-diffusion -> generate -> filter -> augment -> eval
            -> train-completion ---^                            -> metrics

``generate``/``filter``/``augment``/``eval``/``metrics`` run per experiment
cell (mode x seed index). Generation and filtering seeds deliberately omit
the mode so forward-only and bidirectional cells share anchors and noise
streams (matched comparisons); learner seeds omit the mode so the same seed
index gives the same network initialization across modes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bidir, completion, data, envs, filters, learners, metrics
from .config import RunConfig

logger = logging.getLogger(__name__)

SHARED_STAGES = ("collect", "train-diffusion", "train-completion")
CELL_STAGES = ("generate", "filter", "augment", "eval", "metrics")
STAGES = SHARED_STAGES + CELL_STAGES

_UPSTREAM_HINT = {
    "dataset.jsonl": "collect",
    "diffusion": "train-diffusion",
    "completion": "train-completion",
    "generated.jsonl": "generate",
    "filtered.jsonl": "filter",
    "augmented.jsonl": "augment",
}


class StageError(RuntimeError):
    """A stage failed; the message always names the stage."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage {stage}: {message}")


def derive_seed(master_seed: int, stage_name: str) -> int:
    """Pure function of (master seed, stage name) into the 31-bit range."""
    digest = hashlib.sha256(f"{master_seed}:{stage_name}".encode()).digest()
    return int.from_bytes(digest[:4], "big") % (2**31)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Cell:
    mode: str
    seed_index: int

    @property
    def name(self) -> str:
        return f"{self.mode}-s{self.seed_index}"


def stage_id(stage: str, cell: Cell | None = None) -> str:
    return stage if cell is None else f"{stage}:{cell.mode}:s{cell.seed_index}"


class Workspace:
    """Run directory layout plus manifest bookkeeping."""

    def __init__(self, out_dir: str | Path, cfg: RunConfig):
        self.root = Path(out_dir)
        self.cfg = cfg
        self.config_hash = cfg.config_hash()

    # ---- layout -----------------------------------------------------------
    def path(self, rel: str) -> Path:
        return self.root / rel

    def rel(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()

    @property
    def dataset_path(self) -> Path:
        return self.root / "dataset.jsonl"

    @property
    def diffusion_dir(self) -> Path:
        return self.root / "diffusion"

    @property
    def completion_dir(self) -> Path:
        return self.root / "completion"

    def cell_dir(self, cell: Cell) -> Path:
        return self.root / "cells" / cell.name

    def manifest_path(self, sid: str) -> Path:
        return self.root / "manifests" / (sid.replace(":", "--") + ".json")

    # ---- manifests --------------------------------------------------------
    def read_manifest(self, sid: str) -> dict | None:
        path = self.manifest_path(sid)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError:
            return None

    def up_to_date(self, sid: str, inputs: dict[str, str]) -> bool:
        manifest = self.read_manifest(sid)
        if manifest is None:
            return False
        if manifest.get("config_hash") != self.config_hash:
            return False
        if manifest.get("inputs") != inputs:
            return False
        for rel, digest in manifest.get("outputs", {}).items():
            target = self.root / rel
            if not target.exists() or file_sha256(target) != digest:
                return False
        return True

    def write_manifest(
        self,
        stage: str,
        cell: Cell | None,
        seed: int,
        inputs: dict[str, str],
        outputs: list[Path],
        info: dict,
        started: float,
    ) -> dict:
        sid = stage_id(stage, cell)
        finished = time.time()
        manifest = {
            "stage": stage,
            "stage_id": sid,
            "cell": None if cell is None else {"mode": cell.mode, "seed_index": cell.seed_index},
            "config_hash": self.config_hash,
            "seed": seed,
            "inputs": dict(sorted(inputs.items())),
            "outputs": {self.rel(p): file_sha256(p) for p in sorted(outputs)},
            "info": info,
            "timestamps": {
                "started": started,
                "finished": finished,
                "duration_s": finished - started,
            },
        }
        path = self.manifest_path(sid)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
        return manifest

    def require(self, stage: str, rel_paths: list[str]) -> dict[str, str]:
        """Hash the named inputs, failing with the upstream stage's name."""
        hashes: dict[str, str] = {}
        for rel in rel_paths:
            target = self.root / rel
            if not target.exists():
                head = rel.split("/", 1)[0]
                upstream = _UPSTREAM_HINT.get(Path(rel).name, _UPSTREAM_HINT.get(head))
                hint = f"; run {upstream} first" if upstream else ""
                raise StageError(stage, f"missing required artifact {rel}{hint}")
            hashes[rel] = file_sha256(target)
        return hashes


# ---- shared stages ---------------------------------------------------------


def _diffusion_inputs(ws: Workspace, stage: str) -> dict[str, str]:
    return ws.require(
        stage,
        ["diffusion/forward.mlp.json", "diffusion/backward.mlp.json", "diffusion/pair.meta.json"],
    )


def _completion_inputs(ws: Workspace, stage: str) -> dict[str, str]:
    return ws.require(
        stage,
        ["completion/idm.mlp.json", "completion/rm.mlp.json", "completion/completion.meta.json"],
    )


def stage_collect(ws: Workspace, force: bool = False) -> dict:
    cfg = ws.cfg
    sid = stage_id("collect")
    seed = cfg.dataset.seed
    if seed is None:
        seed = derive_seed(cfg.master_seed, "collect")
    inputs: dict[str, str] = {}
    if cfg.dataset.path is not None:
        source = Path(cfg.dataset.path)
        if not source.exists():
            raise StageError("collect", f"dataset path {source} does not exist")
        inputs["external:dataset"] = file_sha256(source)
    if not force and ws.up_to_date(sid, inputs):
        logger.info("collect: up to date, skipping")
        return ws.read_manifest(sid)
    started = time.time()
    ws.root.mkdir(parents=True, exist_ok=True)
    if cfg.dataset.path is not None:
        dataset = data.load_dataset(cfg.dataset.path)
        if dataset.env_name is not None and dataset.env_name != cfg.env:
            raise StageError(
                "collect",
                f"dataset at {cfg.dataset.path} was collected on {dataset.env_name!r}, "
                f"config env is {cfg.env!r}",
            )
    else:
        spec = envs.get_spec(cfg.env)
        dataset = envs.collect_two_mode(
            spec, cfg.dataset.episodes_a, cfg.dataset.episodes_b, seed=seed
        )
    data.save_dataset(dataset, ws.dataset_path)
    info = {
        "env": cfg.env,
        "n_trajectories": dataset.n_trajectories,
        "n_transitions": dataset.n_transitions(),
        "source": "external" if cfg.dataset.path is not None else "scripted",
    }
    return ws.write_manifest("collect", None, seed, inputs, [ws.dataset_path], info, started)


def stage_train_diffusion(ws: Workspace, force: bool = False) -> dict:
    cfg = ws.cfg
    sid = stage_id("train-diffusion")
    inputs = ws.require("train-diffusion", ["dataset.jsonl"])
    if not force and ws.up_to_date(sid, inputs):
        logger.info("train-diffusion: up to date, skipping")
        return ws.read_manifest(sid)
    started = time.time()
    seed = derive_seed(cfg.master_seed, "train-diffusion")
    dataset = data.load_dataset(ws.dataset_path)
    df = cfg.diffusion
    train_cfg = bidir.DiffusionTrainConfig(
        hidden=tuple(df.hidden),
        epochs=df.epochs,
        batch_size=df.batch_size,
        lr=df.lr,
        lr_final=df.lr_final,
        n_steps=df.n_steps,
        beta_start=df.beta_start,
        beta_end=df.beta_end,
        p_null=df.p_null,
        k_embed_dim=df.k_embed_dim,
    )
    pair, history = bidir.train_pair(dataset, df.horizon, train_cfg, seed=seed)
    bidir.save_pair(pair, ws.diffusion_dir)
    info = {
        "horizon": df.horizon,
        "n_steps": df.n_steps,
        "final_loss_forward": history["forward"][-1],
        "final_loss_backward": history["backward"][-1],
    }
    outputs = [
        ws.diffusion_dir / "forward.mlp.json",
        ws.diffusion_dir / "backward.mlp.json",
        ws.diffusion_dir / "pair.meta.json",
    ]
    return ws.write_manifest("train-diffusion", None, seed, inputs, outputs, info, started)


def stage_train_completion(ws: Workspace, force: bool = False) -> dict:
    cfg = ws.cfg
    sid = stage_id("train-completion")
    inputs = ws.require("train-completion", ["dataset.jsonl"])
    if not force and ws.up_to_date(sid, inputs):
        logger.info("train-completion: up to date, skipping")
        return ws.read_manifest(sid)
    started = time.time()
    seed = derive_seed(cfg.master_seed, "train-completion")
    dataset = data.load_dataset(ws.dataset_path)
    spec = envs.get_spec(cfg.env)
    comp_cfg = completion.CompletionConfig(
        hidden=tuple(cfg.completion.hidden),
        epochs=cfg.completion.epochs,
        batch_size=cfg.completion.batch_size,
        lr=cfg.completion.lr,
        holdout_frac=cfg.completion.holdout_frac,
    )
    models, report = completion.train_models(
        dataset, spec.action_low, spec.action_high, comp_cfg, seed=seed
    )
    completion.save_models(models, ws.completion_dir)
    outputs = [
        ws.completion_dir / "idm.mlp.json",
        ws.completion_dir / "rm.mlp.json",
        ws.completion_dir / "completion.meta.json",
    ]
    return ws.write_manifest("train-completion", None, seed, inputs, outputs, report, started)


# ---- per-cell stages -------------------------------------------------------


def stage_generate(ws: Workspace, cell: Cell, force: bool = False) -> dict:
    cfg = ws.cfg
    if cell.mode == "base":
        raise StageError("generate", "base mode generates no trajectories")
    sid = stage_id("generate", cell)
    inputs = ws.require("generate", ["dataset.jsonl"])
    inputs.update(_diffusion_inputs(ws, "generate"))
    inputs.update(_completion_inputs(ws, "generate"))
    if not force and ws.up_to_date(sid, inputs):
        logger.info("%s: up to date, skipping", sid)
        return ws.read_manifest(sid)
    started = time.time()
    # mode deliberately excluded: matched anchors and noise across modes.
    anchor_seed = derive_seed(cfg.master_seed, f"anchors:s{cell.seed_index}")
    sample_seed = derive_seed(cfg.master_seed, f"generate:s{cell.seed_index}")
    dataset = data.load_dataset(ws.dataset_path)
    pair = bidir.load_pair(ws.diffusion_dir)
    models = completion.load_models(ws.completion_dir)
    spec = envs.get_spec(cfg.env)
    gen = cfg.generation
    kappa = (
        gen.kappa if gen.kappa_backward is None else (gen.kappa, gen.kappa_backward)
    )
    region_fn = None
    if gen.anchor_region == "corridor":
        region_fn = lambda states: envs.in_corridor(spec, states)  # noqa: E731
    anchors = bidir.pick_anchors(
        dataset,
        gen.n_anchors,
        cfg.diffusion.horizon,
        np.random.default_rng(anchor_seed),
        kappa=kappa,
        region_mask_fn=region_fn,
    )
    state_trajs, failures = bidir.generate_batch(
        pair,
        anchors,
        seed=sample_seed,
        omega=gen.omega,
        mode=cell.mode,
        extrapolate=gen.extrapolate,
    )
    completed = [
        completion.complete(traj, models, episode_id=i) for i, traj in enumerate(state_trajs)
    ]
    out_path = ws.cell_dir(cell) / "generated.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    data.save_trajectories(completed, out_path, env_name=cfg.env)
    info = {
        "mode": cell.mode,
        "n_anchors": len(anchors),
        "n_generated": len(completed),
        "n_failures": len(failures),
        "failures": failures[:10],
        "omega": gen.omega,
        "anchor_region": gen.anchor_region,
    }
    return ws.write_manifest("generate", cell, sample_seed, inputs, [out_path], info, started)


def stage_filter(ws: Workspace, cell: Cell, force: bool = False) -> dict:
    cfg = ws.cfg
    if cell.mode == "base":
        raise StageError("filter", "base mode has nothing to filter")
    sid = stage_id("filter", cell)
    gen_rel = f"cells/{cell.name}/generated.jsonl"
    inputs = ws.require("filter", ["dataset.jsonl", gen_rel])
    if not force and ws.up_to_date(sid, inputs):
        logger.info("%s: up to date, skipping", sid)
        return ws.read_manifest(sid)
    started = time.time()
    seed = derive_seed(cfg.master_seed, f"filter:s{cell.seed_index}")
    dataset = data.load_dataset(ws.dataset_path)
    candidates = data.load_trajectories(ws.path(gen_rel))
    c_ood, c_greedy = filters.default_counts(len(candidates))
    if cfg.filter.c_ood is not None:
        c_ood = cfg.filter.c_ood
    if cfg.filter.c_greedy is not None:
        c_greedy = cfg.filter.c_greedy
    c_ood, c_greedy = filters.clamp_counts(len(candidates), c_ood, c_greedy)
    kept = []
    if candidates:
        forest = filters.fit_forest(
            dataset.all_states(),
            n_trees=cfg.filter.n_trees,
            subsample=cfg.filter.subsample,
            seed=seed,
        )
        kept = filters.ood_filter(forest, candidates, c_ood)
        kept = filters.greedy_filter(kept, c_greedy)
    out_path = ws.cell_dir(cell) / "filtered.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    data.save_trajectories(kept, out_path, env_name=cfg.env)
    info = {
        "mode": cell.mode,
        "n_candidates": len(candidates),
        "c_ood": c_ood,
        "c_greedy": c_greedy,
        "n_kept": len(kept),
    }
    return ws.write_manifest("filter", cell, seed, inputs, [out_path], info, started)


def stage_augment(ws: Workspace, cell: Cell, force: bool = False) -> dict:
    cfg = ws.cfg
    sid = stage_id("augment", cell)
    rels = ["dataset.jsonl"]
    if cell.mode != "base":
        rels.append(f"cells/{cell.name}/filtered.jsonl")
    inputs = ws.require("augment", rels)
    if not force and ws.up_to_date(sid, inputs):
        logger.info("%s: up to date, skipping", sid)
        return ws.read_manifest(sid)
    started = time.time()
    seed = derive_seed(cfg.master_seed, f"augment:s{cell.seed_index}")
    dataset = data.load_dataset(ws.dataset_path)
    extra: list[data.Trajectory] = []
    if cell.mode != "base":
        extra = data.load_trajectories(ws.path(f"cells/{cell.name}/filtered.jsonl"))
    augmented = dataset.merge(extra, keep_stats=True) if extra else dataset
    out_path = ws.cell_dir(cell) / "augmented.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    data.save_dataset(augmented, out_path)
    info = {
        "mode": cell.mode,
        "n_original": dataset.n_trajectories,
        "n_synthetic": len(extra),
        "n_total": augmented.n_trajectories,
    }
    return ws.write_manifest("augment", cell, seed, inputs, [out_path], info, started)


def stage_eval(ws: Workspace, cell: Cell, force: bool = False) -> dict:
    cfg = ws.cfg
    sid = stage_id("eval", cell)
    aug_rel = f"cells/{cell.name}/augmented.jsonl"
    inputs = ws.require("eval", [aug_rel])
    if not force and ws.up_to_date(sid, inputs):
        logger.info("%s: up to date, skipping", sid)
        return ws.read_manifest(sid)
    started = time.time()
    dataset = data.load_dataset(ws.path(aug_rel))
    spec = envs.get_spec(cfg.env)
    lrn = cfg.learner
    learn_cfg = learners.LearnerConfig(
        hidden=tuple(lrn.hidden),
        steps=lrn.steps,
        batch_size=lrn.batch_size,
        lr=lrn.lr,
        bc_weight=lrn.bc_weight,
        discount=lrn.discount,
    )
    # mode deliberately excluded: same seed index -> same init across modes.
    rollout_seed = derive_seed(cfg.master_seed, f"eval-rollout:s{cell.seed_index}")
    results = {}
    outputs = []
    for algorithm in lrn.algorithms:
        train_seed = derive_seed(cfg.master_seed, f"eval:{algorithm}:s{cell.seed_index}")
        policy = learners.train_policy(
            dataset, algorithm, spec.action_low, spec.action_high, learn_cfg, seed=train_seed
        )
        policy_path = ws.cell_dir(cell) / f"policy-{algorithm}.json"
        learners.save_policy(policy, policy_path)
        outputs.append(policy_path)
        res = learners.evaluate_policy(policy, spec, cfg.evaluation.episodes, rollout_seed)
        results[algorithm] = {
            "mean_return": res.mean_return,
            "success_rate": res.success_rate,
            "episodes": res.episodes,
            "train_seed": train_seed,
        }
    eval_path = ws.cell_dir(cell) / "eval.json"
    eval_path.parent.mkdir(parents=True, exist_ok=True)
    eval_path.write_text(_canonical_json({"mode": cell.mode, "results": results}))
    outputs.append(eval_path)
    info = {"mode": cell.mode, "rollout_seed": rollout_seed, "results": results}
    return ws.write_manifest("eval", cell, rollout_seed, inputs, outputs, info, started)


def stage_metrics(ws: Workspace, cell: Cell, force: bool = False) -> dict:
    cfg = ws.cfg
    if cell.mode == "base":
        raise StageError("metrics", "base mode has no generated trajectories to score")
    sid = stage_id("metrics", cell)
    gen_rel = f"cells/{cell.name}/generated.jsonl"
    flt_rel = f"cells/{cell.name}/filtered.jsonl"
    inputs = ws.require("metrics", ["dataset.jsonl", gen_rel, flt_rel])
    if not force and ws.up_to_date(sid, inputs):
        logger.info("%s: up to date, skipping", sid)
        return ws.read_manifest(sid)
    started = time.time()
    seed = derive_seed(cfg.master_seed, f"metrics:s{cell.seed_index}")
    dataset = data.load_dataset(ws.dataset_path)
    spec = envs.get_spec(cfg.env)
    generated = data.load_trajectories(ws.path(gen_rel))
    kept_keys = {
        _traj_key(t) for t in data.load_trajectories(ws.path(flt_rel))
    }
    rows = []
    for idx, traj in enumerate(generated):
        rows.append(
            {
                "mode": cell.mode,
                "seed_index": cell.seed_index,
                "traj_index": idx,
                "kept": int(_traj_key(traj) in kept_keys),
                "e_dyn": metrics.dynamic_error(traj, spec),
                "e_l2d": metrics.l2_distance(traj, dataset),
            }
        )
    csv_path = ws.cell_dir(cell) / "metrics.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["mode", "seed_index", "traj_index", "kept", "e_dyn", "e_l2d"]
        )
        writer.writeheader()
        writer.writerows(rows)
    info = {"mode": cell.mode, "n_scored": len(rows)}
    info.update(metric_aggregates(rows))
    summary_path = ws.cell_dir(cell) / "metrics-summary.json"
    summary_path.write_text(_canonical_json(info))
    return ws.write_manifest(
        "metrics", cell, seed, inputs, [csv_path, summary_path], info, started
    )


def _traj_key(traj: data.Trajectory) -> bytes:
    return traj.states().tobytes()


def metric_aggregates(rows: list[dict]) -> dict:
    """Means/medians over all scored trajectories and over the kept subset."""
    out: dict = {}
    for label, subset in (
        ("all", rows),
        ("kept", [r for r in rows if r["kept"]]),
    ):
        if subset:
            e_dyn = np.array([r["e_dyn"] for r in subset], dtype=np.float64)
            e_l2d = np.array([r["e_l2d"] for r in subset], dtype=np.float64)
            out[label] = {
                "n": len(subset),
                "e_dyn_mean": float(e_dyn.mean()),
                "e_dyn_median": float(np.median(e_dyn)),
                "e_l2d_mean": float(e_l2d.mean()),
                "e_l2d_median": float(np.median(e_l2d)),
            }
        else:
            out[label] = {"n": 0}
    return out


_SHARED_FNS = {
    "collect": stage_collect,
    "train-diffusion": stage_train_diffusion,
    "train-completion": stage_train_completion,
}
_CELL_FNS = {
    "generate": stage_generate,
    "filter": stage_filter,
    "augment": stage_augment,
    "eval": stage_eval,
    "metrics": stage_metrics,
}


def run_stage(
    ws: Workspace, stage: str, cell: Cell | None = None, force: bool = False
) -> dict:
    """Dispatch one stage, wrapping unexpected errors with the stage name."""
    if stage in _SHARED_FNS:
        fn, args = _SHARED_FNS[stage], (ws,)
    elif stage in _CELL_FNS:
        if cell is None:
            raise StageError(stage, "this stage needs a cell (mode and seed index)")
        fn, args = _CELL_FNS[stage], (ws, cell)
    else:
        raise StageError(stage, f"unknown stage; expected one of {STAGES}")
    try:
        return fn(*args, force=force)
    except StageError:
        raise
    except Exception as exc:  # pragma: no cover - defensive wrapper
        raise StageError(stage, str(exc)) from exc
