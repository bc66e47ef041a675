"""Run configuration: YAML schema, env-var overrides, validation, hashing.

A single nested config drives every pipeline stage. ``out_dir`` and ``jobs``
are execution parameters and are excluded from the canonical hash so that the
same config run into two directories produces identical manifests.

Environment overrides use the ``BITRAJ_`` prefix; nested fields join section
and field with a double underscore, e.g. ``BITRAJ_GENERATION__OMEGA=0.5``.
Values are parsed as YAML scalars.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from . import envs
from .learners import ALGORITHMS

ENV_PREFIX = "BITRAJ_"
ANCHOR_REGIONS = ("all", "corridor")
EXPERIMENT_MODES = ("base", "forward-only", "bidirectional")


class ConfigError(ValueError):
    """Raised with one line per offending config field."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__(
            "invalid config (%d problem%s):\n%s"
            % (len(problems), "s" if len(problems) != 1 else "", "\n".join(
                f"  - {p}" for p in problems
            ))
        )


@dataclass
class DatasetConfig:
    path: str | None = None
    episodes_a: int = 12
    episodes_b: int = 12
    seed: int | None = None


@dataclass
class DiffusionConfig:
    horizon: int = 8
    n_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.08
    p_null: float = 0.25
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    lr_final: float | None = None
    k_embed_dim: int = 32


@dataclass
class GenerationConfig:
    n_anchors: int = 256
    omega: float = 0.8
    kappa: float = 0.9
    kappa_backward: float | None = None
    anchor_region: str = "all"
    extrapolate: bool = False


@dataclass
class CompletionConfig:
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    epochs: int = 300
    batch_size: int = 256
    lr: float = 1e-3
    holdout_frac: float = 0.1


@dataclass
class FilterConfig:
    c_ood: int | None = None
    c_greedy: int | None = None
    n_trees: int = 100
    subsample: int = 256


@dataclass
class LearnerSection:
    algorithms: list[str] = field(default_factory=lambda: ["bc"])
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    bc_weight: float = 1.0
    discount: float = 0.99


@dataclass
class EvaluationConfig:
    episodes: int = 50
    seeds: int = 5
    modes: list[str] = field(default_factory=lambda: list(EXPERIMENT_MODES))


@dataclass
class RunConfig:
    env: str = "point-reach"
    out_dir: str = "runs/default"
    master_seed: int = 0
    jobs: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    completion: CompletionConfig = field(default_factory=CompletionConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    learner: LearnerSection = field(default_factory=LearnerSection)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_dict(self) -> dict:
        """Config identity: everything except execution parameters."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("jobs")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}


def _coerce_section(cls, raw: dict, section: str, problems: list[str]):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            problems.append(f"{section}.{key}: unknown field")
            continue
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        problems.append(f"{section}: {exc}")
        return cls()


def from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig from a nested dict, reporting every bad field."""
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a mapping"])
    problems: list[str] = []
    kwargs = {}
    for key, value in raw.items():
        if key not in _SECTIONS:
            problems.append(f"{key}: unknown field")
            continue
        default = getattr(RunConfig(), key)
        if is_dataclass(default):
            if not isinstance(value, dict):
                problems.append(f"{key}: expected a mapping of fields")
                continue
            kwargs[key] = _coerce_section(type(default), value, key, problems)
        else:
            kwargs[key] = value
    cfg = RunConfig(**{k: v for k, v in kwargs.items()})
    problems.extend(validate(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def _check_int(problems, path, value, low=1):
    if not isinstance(value, int) or isinstance(value, bool) or value < low:
        problems.append(f"{path}: expected an integer >= {low}, got {value!r}")


def _check_float(problems, path, value, low=None, high=None, low_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        problems.append(f"{path}: expected a number, got {value!r}")
        return
    v = float(value)
    if low is not None and (v <= low if low_open else v < low):
        problems.append(f"{path}: must be {'>' if low_open else '>='} {low}, got {v}")
    elif high is not None and v > high:
        problems.append(f"{path}: must be <= {high}, got {v}")


def _check_hidden(problems, path, value):
    if (
        not isinstance(value, list)
        or not value
        or any(not isinstance(h, int) or isinstance(h, bool) or h < 1 for h in value)
    ):
        problems.append(f"{path}: expected a non-empty list of positive integers, got {value!r}")


def validate(cfg: RunConfig) -> list[str]:
    """Return one problem string per offending field (empty when valid)."""
    p: list[str] = []
    if cfg.env not in envs.env_names():
        p.append(f"env: unknown env {cfg.env!r}; known: {envs.env_names()}")
    if not isinstance(cfg.out_dir, str) or not cfg.out_dir:
        p.append(f"out_dir: expected a non-empty string, got {cfg.out_dir!r}")
    _check_int(p, "master_seed", cfg.master_seed, low=0)
    _check_int(p, "jobs", cfg.jobs)

    ds = cfg.dataset
    if ds.path is not None and not isinstance(ds.path, str):
        p.append(f"dataset.path: expected a string path or null, got {ds.path!r}")
    _check_int(p, "dataset.episodes_a", ds.episodes_a)
    _check_int(p, "dataset.episodes_b", ds.episodes_b)
    if ds.seed is not None:
        _check_int(p, "dataset.seed", ds.seed, low=0)

    df = cfg.diffusion
    _check_int(p, "diffusion.horizon", df.horizon)
    _check_int(p, "diffusion.n_steps", df.n_steps)
    _check_float(p, "diffusion.beta_start", df.beta_start, low=0.0, low_open=True, high=1.0)
    _check_float(p, "diffusion.beta_end", df.beta_end, low=0.0, low_open=True, high=1.0)
    if (
        isinstance(df.beta_start, (int, float))
        and isinstance(df.beta_end, (int, float))
        and not isinstance(df.beta_start, bool)
        and not isinstance(df.beta_end, bool)
        and df.beta_end < df.beta_start
    ):
        p.append("diffusion.beta_end: must be >= diffusion.beta_start")
    _check_float(p, "diffusion.p_null", df.p_null, low=0.0, high=1.0)
    _check_hidden(p, "diffusion.hidden", df.hidden)
    _check_int(p, "diffusion.epochs", df.epochs)
    _check_int(p, "diffusion.batch_size", df.batch_size)
    _check_float(p, "diffusion.lr", df.lr, low=0.0, low_open=True)
    if df.lr_final is not None:
        _check_float(p, "diffusion.lr_final", df.lr_final, low=0.0, low_open=True)
    _check_int(p, "diffusion.k_embed_dim", df.k_embed_dim, low=2)

    gen = cfg.generation
    _check_int(p, "generation.n_anchors", gen.n_anchors, low=0)
    omega_high = None if gen.extrapolate is True else 1.0
    _check_float(p, "generation.omega", gen.omega, low=0.0, high=omega_high)
    _check_float(p, "generation.kappa", gen.kappa, low=0.0, high=1.0)
    if gen.kappa_backward is not None:
        _check_float(p, "generation.kappa_backward", gen.kappa_backward, low=0.0, high=1.0)
    if gen.anchor_region not in ANCHOR_REGIONS:
        p.append(
            f"generation.anchor_region: must be one of {ANCHOR_REGIONS}, got {gen.anchor_region!r}"
        )
    if not isinstance(gen.extrapolate, bool):
        p.append(f"generation.extrapolate: expected a boolean, got {gen.extrapolate!r}")

    comp = cfg.completion
    _check_hidden(p, "completion.hidden", comp.hidden)
    _check_int(p, "completion.epochs", comp.epochs)
    _check_int(p, "completion.batch_size", comp.batch_size)
    _check_float(p, "completion.lr", comp.lr, low=0.0, low_open=True)
    _check_float(p, "completion.holdout_frac", comp.holdout_frac, low=0.0, high=0.5)

    flt = cfg.filter
    if flt.c_ood is not None:
        _check_int(p, "filter.c_ood", flt.c_ood, low=0)
    if flt.c_greedy is not None:
        _check_int(p, "filter.c_greedy", flt.c_greedy, low=0)
    _check_int(p, "filter.n_trees", flt.n_trees)
    _check_int(p, "filter.subsample", flt.subsample, low=2)

    lrn = cfg.learner
    if (
        not isinstance(lrn.algorithms, list)
        or not lrn.algorithms
        or any(a not in ALGORITHMS for a in lrn.algorithms)
    ):
        p.append(
            f"learner.algorithms: expected a non-empty list from {ALGORITHMS}, "
            f"got {lrn.algorithms!r}"
        )
    _check_hidden(p, "learner.hidden", lrn.hidden)
    _check_int(p, "learner.steps", lrn.steps)
    _check_int(p, "learner.batch_size", lrn.batch_size)
    _check_float(p, "learner.lr", lrn.lr, low=0.0, low_open=True)
    _check_float(p, "learner.bc_weight", lrn.bc_weight, low=0.0)
    _check_float(p, "learner.discount", lrn.discount, low=0.0, high=1.0)

    ev = cfg.evaluation
    _check_int(p, "evaluation.episodes", ev.episodes)
    _check_int(p, "evaluation.seeds", ev.seeds)
    if (
        not isinstance(ev.modes, list)
        or not ev.modes
        or any(m not in EXPERIMENT_MODES for m in ev.modes)
    ):
        p.append(
            f"evaluation.modes: expected a non-empty list from {EXPERIMENT_MODES}, "
            f"got {ev.modes!r}"
        )
    return p


def apply_env_overrides(raw: dict, environ=None) -> dict:
    """Overlay BITRAJ_* environment variables onto a raw config dict."""
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(raw))  # deep copy of plain data
    for key, text in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        dotted = key[len(ENV_PREFIX):].lower().split("__")
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError:
            value = text
        node = out
        for part in dotted[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([f"{'.'.join(dotted)}: cannot override non-mapping field"])
        node[dotted[-1]] = value
    return out


def load_config(
    path: str | Path | None = None,
    overrides: dict | None = None,
    use_env: bool = True,
) -> RunConfig:
    """Load YAML config, apply env-var and explicit overrides, validate."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError([f"top level: expected a mapping in {path}"])
        raw = loaded
    if use_env:
        raw = apply_env_overrides(raw)
    for key, value in (overrides or {}).items():
        parts = key.split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return from_dict(raw)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
