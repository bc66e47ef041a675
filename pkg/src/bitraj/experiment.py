"""End-to-end augmentation experiment: base vs forward-only vs bidirectional.

``run_experiment`` drives the stage pipeline for every requested mode and
seed index, tolerating per-cell failures (each is reported with its stage
name; artifacts of completed cells are preserved), then writes an aggregate
report:

    report/cells.csv            one row per (mode, seed index, algorithm)
    report/metrics_scatter.csv  per-trajectory dynamics-error vs novelty rows
    report/summary.json         aggregates recomputable from the CSVs

Cells are independent, so ``jobs > 1`` fans them out across processes.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import EXPERIMENT_MODES, RunConfig
from .stages import (
    Cell,
    StageError,
    Workspace,
    metric_aggregates,
    run_stage,
)

logger = logging.getLogger(__name__)

GENERATIVE_CELL_STAGES = ("generate", "filter", "augment", "eval", "metrics")
BASE_CELL_STAGES = ("augment", "eval")


@dataclass
class ExperimentReport:
    out_dir: Path
    cells: list[dict]
    failures: list[dict]
    summary: dict
    scatter_rows: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def cell_stages(mode: str) -> tuple[str, ...]:
    return BASE_CELL_STAGES if mode == "base" else GENERATIVE_CELL_STAGES


def run_cell(ws: Workspace, cell: Cell, force: bool = False) -> None:
    for stage in cell_stages(cell.mode):
        run_stage(ws, stage, cell, force=force)


def _run_cell_worker(out_dir: str, raw_cfg: dict, mode: str, seed_index: int, force: bool):
    cfg = config_mod.from_dict(raw_cfg)
    ws = Workspace(out_dir, cfg)
    run_cell(ws, Cell(mode, seed_index), force=force)


def run_experiment(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    modes: list[str] | None = None,
    jobs: int | None = None,
    force: bool = False,
) -> ExperimentReport:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    jobs = int(jobs if jobs is not None else cfg.jobs)
    modes = list(modes if modes is not None else cfg.evaluation.modes)
    bad = [m for m in modes if m not in EXPERIMENT_MODES]
    if bad:
        raise ValueError(f"unknown experiment modes {bad}; expected subset of {EXPERIMENT_MODES}")
    started = time.time()
    ws = Workspace(out, cfg)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, out / "config.yaml")

    failures: list[dict] = []
    shared = ["collect"]
    if any(m != "base" for m in modes):
        shared += ["train-diffusion", "train-completion"]
    for stage in shared:
        try:
            run_stage(ws, stage, force=force)
        except StageError as exc:
            failures.append({"stage": exc.stage, "cell": None, "error": str(exc)})
            logger.error("shared stage failed: %s", exc)
            report = _write_report(ws, modes, failures, started)
            return report

    cells = [Cell(mode, k) for mode in modes for k in range(cfg.evaluation.seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(
                    _run_cell_worker, str(out), cfg.to_dict(), c.mode, c.seed_index, force
                ): c
                for c in cells
            }
            for future, cell in futures.items():
                try:
                    future.result()
                except StageError as exc:
                    failures.append(
                        {
                            "stage": exc.stage,
                            "cell": {"mode": cell.mode, "seed_index": cell.seed_index},
                            "error": str(exc),
                        }
                    )
    else:
        for cell in cells:
            try:
                run_cell(ws, cell, force=force)
            except StageError as exc:
                failures.append(
                    {
                        "stage": exc.stage,
                        "cell": {"mode": cell.mode, "seed_index": cell.seed_index},
                        "error": str(exc),
                    }
                )
    for failure in failures:
        logger.error("cell failed: %s", failure)
    return _write_report(ws, modes, failures, started)


def _read_json(path: Path) -> dict | None:
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError:
        return None


def _write_report(
    ws: Workspace, modes: list[str], failures: list[dict], started: float
) -> ExperimentReport:
    cfg = ws.cfg
    report_dir = ws.root / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    cell_rows: list[dict] = []
    scatter_rows: list[dict] = []
    for mode in modes:
        for k in range(cfg.evaluation.seeds):
            cell = Cell(mode, k)
            cdir = ws.cell_dir(cell)
            evals = _read_json(cdir / "eval.json")
            aug = ws.read_manifest(f"augment:{mode}:s{k}")
            gen = None if mode == "base" else ws.read_manifest(f"generate:{mode}:s{k}")
            flt = None if mode == "base" else ws.read_manifest(f"filter:{mode}:s{k}")
            if evals is not None:
                for algorithm, res in sorted(evals["results"].items()):
                    cell_rows.append(
                        {
                            "mode": mode,
                            "seed_index": k,
                            "algorithm": algorithm,
                            "mean_return": res["mean_return"],
                            "success_rate": res["success_rate"],
                            "episodes": res["episodes"],
                            "n_generated": 0 if gen is None else gen["info"]["n_generated"],
                            "n_kept": 0 if flt is None else flt["info"]["n_kept"],
                            "n_train_trajectories": (
                                None if aug is None else aug["info"]["n_total"]
                            ),
                        }
                    )
            csv_path = cdir / "metrics.csv"
            if mode != "base" and csv_path.exists():
                with csv_path.open() as fh:
                    for row in csv.DictReader(fh):
                        scatter_rows.append(
                            {
                                "mode": row["mode"],
                                "seed_index": int(row["seed_index"]),
                                "traj_index": int(row["traj_index"]),
                                "kept": int(row["kept"]),
                                "e_dyn": float(row["e_dyn"]),
                                "e_l2d": float(row["e_l2d"]),
                            }
                        )

    cells_csv = report_dir / "cells.csv"
    cell_fields = [
        "mode", "seed_index", "algorithm", "mean_return", "success_rate",
        "episodes", "n_generated", "n_kept", "n_train_trajectories",
    ]
    with cells_csv.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cell_fields)
        writer.writeheader()
        writer.writerows(cell_rows)

    scatter_csv = report_dir / "metrics_scatter.csv"
    scatter_fields = ["mode", "seed_index", "traj_index", "kept", "e_dyn", "e_l2d"]
    with scatter_csv.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=scatter_fields)
        writer.writeheader()
        writer.writerows(scatter_rows)

    summary: dict = {
        "env": cfg.env,
        "master_seed": cfg.master_seed,
        "config_hash": ws.config_hash,
        "modes": modes,
        "seeds": cfg.evaluation.seeds,
        "policy": {},
        "metrics": {},
        "failures": failures,
        "wall_time_s": time.time() - started,
    }
    for mode in modes:
        for algorithm in cfg.learner.algorithms:
            rows = [
                r for r in cell_rows if r["mode"] == mode and r["algorithm"] == algorithm
            ]
            if not rows:
                continue
            succ = np.array([r["success_rate"] for r in rows], dtype=np.float64)
            rets = np.array([r["mean_return"] for r in rows], dtype=np.float64)
            summary["policy"].setdefault(mode, {})[algorithm] = {
                "n_cells": len(rows),
                "success_mean": float(succ.mean()),
                "success_std": float(succ.std()),
                "success_per_seed": [float(v) for v in succ],
                "return_mean": float(rets.mean()),
            }
        mode_rows = [r for r in scatter_rows if r["mode"] == mode]
        if mode_rows:
            summary["metrics"][mode] = metric_aggregates(mode_rows)
    (report_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1))

    return ExperimentReport(
        out_dir=ws.root,
        cells=cell_rows,
        failures=failures,
        summary=summary,
        scatter_rows=scatter_rows,
    )
