"""Command-line pipeline driver.

Each subcommand runs one pipeline stage (or the whole experiment for
``run-all``) against a YAML config. ``BITRAJ_``-prefixed environment
variables override config fields (nested fields join on double underscores,
e.g. ``BITRAJ_GENERATION__OMEGA=0.5``); ``--seed``/``--out``/``--jobs``
override the master seed, output directory, and worker count.

Exit codes: 0 success, 1 stage or experiment failure, 2 invalid config or
usage.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiment
from .config import EXPERIMENT_MODES, ConfigError, load_config
from .stages import Cell, StageError, Workspace, run_stage

logger = logging.getLogger(__name__)

SHARED_COMMANDS = ("collect", "train-diffusion", "train-completion")
CELL_COMMANDS = ("generate", "filter", "augment", "eval", "metrics")
DEFAULT_CELL_MODE = "bidirectional"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitraj",
        description=(
            "Bidirectional trajectory-diffusion augmentation pipeline for "
            "offline RL on toy control tasks."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", default=None, help="YAML config file (defaults apply)")
        cmd.add_argument("--seed", type=int, default=None, help="master seed override")
        cmd.add_argument("--out", default=None, help="output directory override")
        cmd.add_argument("--jobs", type=int, default=None, help="parallel worker cap")
        cmd.add_argument(
            "--mode",
            choices=list(EXPERIMENT_MODES),
            default=None,
            help="experiment mode (cell stages and run-all)",
        )
        cmd.add_argument(
            "--force", action="store_true", help="re-run even when manifests are up to date"
        )
        return cmd

    add("collect", "collect or import the offline dataset")
    add("train-diffusion", "train the forward and backward denoisers")
    add("train-completion", "train the inverse-dynamics and reward models")
    for name, text in (
        ("generate", "sample anchored trajectories and fill in actions/rewards"),
        ("filter", "apply the isolation-forest and reward filters"),
        ("augment", "merge kept synthetic trajectories into the dataset"),
        ("eval", "train and evaluate policies on the augmented dataset"),
        ("metrics", "score generated trajectories (dynamics error, novelty)"),
    ):
        cmd = add(name, text)
        cmd.add_argument(
            "--seed-index",
            type=int,
            default=0,
            help="experiment cell index (default 0)",
        )
    add("run-all", "run every stage for all configured modes and seeds")
    return parser


def _load(args) -> "RunConfig":
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    return load_config(args.config, overrides=overrides)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: config file not found: {exc.filename}", file=sys.stderr)
        return 2

    try:
        if args.command == "run-all":
            modes = [args.mode] if args.mode else None
            report = experiment.run_experiment(
                cfg, out_dir=cfg.out_dir, modes=modes, jobs=cfg.jobs, force=args.force
            )
            _print_report(report)
            return 0 if report.ok else 1
        ws = Workspace(cfg.out_dir, cfg)
        if args.command in SHARED_COMMANDS:
            manifest = run_stage(ws, args.command, force=args.force)
        else:
            cell = Cell(args.mode or DEFAULT_CELL_MODE, args.seed_index)
            manifest = run_stage(ws, args.command, cell, force=args.force)
        print(f"{manifest['stage_id']}: ok -> {ws.manifest_path(manifest['stage_id'])}")
        return 0
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _print_report(report: experiment.ExperimentReport) -> None:
    print(f"experiment report: {report.out_dir / 'report'}")
    for mode, algs in sorted(report.summary.get("policy", {}).items()):
        for algorithm, res in sorted(algs.items()):
            print(
                f"  {mode:14s} {algorithm:10s} success={res['success_mean']:.3f} "
                f"(n={res['n_cells']}) return={res['return_mean']:.3f}"
            )
    for mode, groups in sorted(report.summary.get("metrics", {}).items()):
        kept = groups.get("kept", {})
        if kept.get("n"):
            print(
                f"  {mode:14s} kept={kept['n']} median dyn-err={kept['e_dyn_median']:.4f} "
                f"median novelty={kept['e_l2d_median']:.4f}"
            )
    for failure in report.failures:
        print(f"  FAILED {failure['cell']}: {failure['error']}")


if __name__ == "__main__":
    sys.exit(main())
