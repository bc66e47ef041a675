"""Paired forward/backward window diffusion and anchor stitching.

The forward model generates H-state continuations anchored at the window
start; the backward model generates H-state histories anchored at the window
end. Both are trained on every contiguous H-state slice of the dataset,
conditioned on that slice's directional discounted return. A stitched
trajectory glues a backward sample, the shared anchor state, and a forward
sample into 2H-1 states with the anchor at index H-1.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import NormStats, OfflineDataset, window_return
from .diffusion import (
    Denoiser,
    NoiseSchedule,
    SamplerError,
    StateWindow,
    linear_schedule,
    make_denoiser,
    denoise_loss,
    sample_batch,
)

logger = logging.getLogger(__name__)

GEN_SCHEMA = "gen-v1"
PAIR_FORMAT = "bidir-v1"


class StitchError(ValueError):
    """Raised when window anchors disagree at a stitch point."""


@dataclass
class DiffusionTrainConfig:
    hidden: tuple[int, ...] = (128, 128)
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    lr_final: float | None = None
    n_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.08
    p_null: float = 0.25
    k_embed_dim: int = 32


@dataclass(frozen=True)
class ReturnScale:
    """Min-max map of observed window returns onto [-1, 1]."""

    lo: float
    hi: float

    def norm(self, r: np.ndarray | float) -> np.ndarray | float:
        span = self.hi - self.lo
        if span < 1e-12:
            return np.zeros_like(np.asarray(r, dtype=np.float64))
        return -1.0 + 2.0 * (np.asarray(r, dtype=np.float64) - self.lo) / span

    @classmethod
    def fit(cls, returns: np.ndarray) -> "ReturnScale":
        return cls(lo=float(np.min(returns)), hi=float(np.max(returns)))


def extract_windows(
    dataset: OfflineDataset, horizon: int, gamma: float, direction: str
) -> tuple[np.ndarray, np.ndarray]:
    """All contiguous H-state windows and their directional returns.

    A trajectory with L states yields L-H+1 windows; trajectories shorter
    than H states yield none. Windows are returned in raw (un-normalized)
    state units.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    windows, returns = [], []
    for traj in dataset.trajectories:
        states = traj.states()
        length = states.shape[0]
        if direction == "forward":
            for t in range(0, length - horizon + 1):
                windows.append(states[t : t + horizon])
                returns.append(window_return(traj, t, horizon, gamma, "forward"))
        elif direction == "backward":
            for t in range(horizon - 1, length):
                windows.append(states[t - horizon + 1 : t + 1])
                returns.append(window_return(traj, t, horizon, gamma, "backward"))
        else:
            raise ValueError(f"direction must be forward/backward, got {direction!r}")
    if not windows:
        raise ValueError(f"no {horizon}-state windows in dataset")
    return np.stack(windows), np.asarray(returns)


@dataclass
class BiModelPair:
    """Forward and backward denoisers plus everything needed to sample them."""

    fwd: Denoiser
    bwd: Denoiser
    schedule: NoiseSchedule
    horizon: int
    state_dim: int
    gamma: float
    stats: NormStats
    ret_scale_fwd: ReturnScale
    ret_scale_bwd: ReturnScale


def _train_one(
    den: Denoiser,
    schedule: NoiseSchedule,
    windows_norm: np.ndarray,
    returns_norm: np.ndarray,
    anchor_pos: int,
    cfg: DiffusionTrainConfig,
    rng: np.random.Generator,
    tag: str,
) -> tuple[Denoiser, list[float]]:
    state = nn.init_optimizer(den.mlp, cfg.lr)
    params = den.mlp
    history = []
    n = windows_norm.shape[0]
    log_every = max(1, cfg.epochs // 10)
    for epoch in range(cfg.epochs):
        if cfg.lr_final is not None and cfg.epochs > 1:
            frac = epoch / (cfg.epochs - 1)
            state.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + math.cos(math.pi * frac))
        losses = []
        for idx in nn.iter_minibatches(n, cfg.batch_size, rng):
            den_cur = Denoiser(params, den.horizon, den.state_dim, den.k_embed_dim)
            loss, grads = denoise_loss(
                den_cur, schedule, windows_norm[idx], returns_norm[idx],
                anchor_pos, cfg.p_null, rng,
            )
            params, state = nn.sgd_step(params, state, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if (epoch + 1) % log_every == 0 or epoch == cfg.epochs - 1:
            logger.info("%s denoiser epoch %d/%d loss %.6f", tag, epoch + 1, cfg.epochs, history[-1])
    return Denoiser(params, den.horizon, den.state_dim, den.k_embed_dim), history


def train_pair(
    dataset: OfflineDataset,
    horizon: int,
    cfg: DiffusionTrainConfig,
    seed: int,
) -> tuple[BiModelPair, dict[str, list[float]]]:
    """Train the forward and backward denoisers on one dataset.

    Returns the pair and the per-epoch loss history for each direction.
    """
    gamma = _dataset_gamma(dataset)
    schedule = linear_schedule(cfg.n_steps, cfg.beta_start, cfg.beta_end)
    stats = dataset.stats
    state_dim = dataset.trajectories[0].transitions[0].s.shape[0]

    seeds = np.random.SeedSequence(seed).spawn(4)
    history: dict[str, list[float]] = {}
    models: dict[str, Denoiser] = {}
    for direction, init_ss, train_ss in (
        ("forward", seeds[0], seeds[1]),
        ("backward", seeds[2], seeds[3]),
    ):
        windows, returns = extract_windows(dataset, horizon, gamma, direction)
        scale = ReturnScale.fit(returns)
        windows_norm = stats.norm_state(windows)
        returns_norm = np.asarray(scale.norm(returns))
        anchor_pos = 0 if direction == "forward" else horizon - 1
        den = make_denoiser(
            horizon, state_dim, cfg.hidden, cfg.k_embed_dim,
            seed=int(init_ss.generate_state(1)[0]),
        )
        rng = np.random.default_rng(train_ss)
        models[direction], history[direction] = _train_one(
            den, schedule, windows_norm, returns_norm, anchor_pos, cfg, rng, direction
        )
        if direction == "forward":
            scale_fwd = scale
        else:
            scale_bwd = scale
    return (
        BiModelPair(
            fwd=models["forward"], bwd=models["backward"], schedule=schedule,
            horizon=horizon, state_dim=state_dim, gamma=gamma, stats=stats,
            ret_scale_fwd=scale_fwd, ret_scale_bwd=scale_bwd,
        ),
        history,
    )


def _dataset_gamma(dataset: OfflineDataset) -> float:
    from .envs import get_spec  # local import to keep module deps one-way

    if dataset.env_name is None:
        return 0.99
    return get_spec(dataset.env_name).gamma


@dataclass(frozen=True)
class AnchorSpec:
    """One sampled anchor with raw directional target returns and provenance."""

    state: np.ndarray
    target_return_fwd: float
    target_return_bwd: float
    traj_idx: int
    state_idx: int


def pick_anchors(
    dataset: OfflineDataset,
    n: int,
    horizon: int,
    rng: np.random.Generator,
    kappa: float | tuple[float, float] = 0.9,
    region_mask_fn=None,
) -> list[AnchorSpec]:
    """Draw n anchors uniformly (with replacement) over dataset states.

    Target returns are the kappa-quantile (linear interpolation) of the
    observed per-direction window returns, clipped to the observed range.
    kappa may be a single quantile for both directions or a
    (forward, backward) pair. region_mask_fn optionally restricts the
    candidate states, e.g. to the corridor region.
    """
    if n < 0:
        raise ValueError(f"anchor count must be >= 0, got n={n}")
    if n == 0:
        return []
    kappa_f, kappa_b = kappa if isinstance(kappa, tuple) else (kappa, kappa)
    for k in (kappa_f, kappa_b):
        if not 0.0 <= k <= 1.0:
            raise ValueError(f"kappa must be in [0, 1], got {k}")
    gamma = _dataset_gamma(dataset)
    _, rets_f = extract_windows(dataset, horizon, gamma, "forward")
    _, rets_b = extract_windows(dataset, horizon, gamma, "backward")
    target_f = float(np.clip(np.quantile(rets_f, kappa_f), rets_f.min(), rets_f.max()))
    target_b = float(np.clip(np.quantile(rets_b, kappa_b), rets_b.min(), rets_b.max()))

    pool = []
    for ti, traj in enumerate(dataset.trajectories):
        states = traj.states()
        for si in range(states.shape[0]):
            pool.append((ti, si))
    states_flat = dataset.all_states()
    if region_mask_fn is not None:
        mask = np.asarray(region_mask_fn(states_flat), dtype=bool).reshape(-1)
        if mask.shape[0] != states_flat.shape[0]:
            raise ValueError(
                f"region mask has {mask.shape[0]} entries for {states_flat.shape[0]} states"
            )
        if not mask.any():
            raise ValueError("region filter excludes every dataset state")
        pool = [p for p, keep in zip(pool, mask) if keep]
        states_flat = states_flat[mask]
    choice = rng.integers(0, len(pool), size=n)
    return [
        AnchorSpec(
            state=states_flat[i].copy(),
            target_return_fwd=target_f,
            target_return_bwd=target_b,
            traj_idx=pool[i][0],
            state_idx=pool[i][1],
        )
        for i in choice
    ]


@dataclass
class StitchedStateTraj:
    """State-only generated trajectory; actions and rewards come later.

    Full stitches have 2H-1 states with the anchor at index H-1;
    forward-only batches emit H states with the anchor at index 0.
    """

    states: np.ndarray
    anchor_index: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise ValueError(f"states must be (L, dim), got shape {self.states.shape}")
        if not 0 <= self.anchor_index < self.states.shape[0]:
            raise ValueError(
                f"anchor index {self.anchor_index} outside {self.states.shape[0]} states"
            )

    @property
    def anchor(self) -> np.ndarray:
        return self.states[self.anchor_index]


def stitch(
    back: StateWindow, anchor: np.ndarray, fwd: StateWindow
) -> StitchedStateTraj:
    """Glue a backward window, the anchor state, and a forward window.

    Anchors must agree bit-exactly: the backward window's last row and the
    forward window's first row both equal the anchor. Output length is 2H-1.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    h = fwd.horizon
    if back.horizon != h:
        raise StitchError(f"window horizons differ: {back.horizon} vs {h}")
    if back.anchor_pos != h - 1:
        raise StitchError(f"backward window must anchor at {h - 1}, got {back.anchor_pos}")
    if fwd.anchor_pos != 0:
        raise StitchError(f"forward window must anchor at 0, got {fwd.anchor_pos}")
    if not np.array_equal(back.anchor, anchor) or not np.array_equal(fwd.anchor, anchor):
        raise StitchError("window anchors do not match the shared anchor state")
    states = np.concatenate([back.states[: h - 1], anchor[None, :], fwd.states[1:h]])
    return StitchedStateTraj(states, anchor_index=h - 1)


def _anchor_rngs(seed: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent forward/backward streams per anchor. The forward stream
    never depends on whether the backward half is sampled, so forward halves
    are identical across generation modes under the same seed."""
    fwd = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index, 0)))
    bwd = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index, 1)))
    return fwd, bwd


def _sample_direction(
    pair: BiModelPair,
    anchors: np.ndarray,
    returns_norm: np.ndarray,
    direction: str,
    omega: float,
    seed: int,
    extrapolate: bool,
) -> tuple[np.ndarray, dict[int, str]]:
    """Batched sampling with per-anchor isolation of sampler failures.

    The fast path samples every anchor in one batch; if that aborts, each
    anchor is re-sampled alone (same per-anchor streams) so one bad anchor
    cannot sink the rest. Returns the windows and a map index -> error.
    """
    den = pair.fwd if direction == "forward" else pair.bwd
    anchor_pos = 0 if direction == "forward" else pair.horizon - 1
    stream = 0 if direction == "forward" else 1
    b = anchors.shape[0]

    def rngs_for(indices):
        return [
            np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i, stream)))
            for i in indices
        ]

    try:
        out = sample_batch(
            den, pair.schedule, anchors, returns_norm, anchor_pos, omega,
            rngs_for(range(b)), pair.stats, extrapolate,
        )
        return out, {}
    except SamplerError:
        logger.warning("batched %s sampling aborted; retrying per anchor", direction)
    out = np.zeros((b, pair.horizon, pair.state_dim))
    failures: dict[int, str] = {}
    for i in range(b):
        try:
            out[i] = sample_batch(
                den, pair.schedule, anchors[i : i + 1], returns_norm[i : i + 1],
                anchor_pos, omega, rngs_for([i]), pair.stats, extrapolate,
            )[0]
        except SamplerError as exc:
            failures[i] = str(exc)
            logger.warning("anchor %d %s sampling failed: %s", i, direction, exc)
    return out, failures


MODES = ("bidirectional", "forward-only", "backward-only")


def generate_batch(
    pair: BiModelPair,
    anchors: list[AnchorSpec],
    seed: int,
    omega: float = 0.8,
    mode: str = "bidirectional",
    attach_history: bool = False,
    dataset: OfflineDataset | None = None,
    extrapolate: bool = False,
) -> tuple[list[StitchedStateTraj], list[dict]]:
    """Generate one stitched state trajectory per anchor.

    mode "bidirectional" stitches a backward and a forward sample around each
    anchor. mode "forward-only" keeps just the forward sample; with
    attach_history=True the backward half is replaced by the anchor's true
    dataset history when the anchor sits at least H-1 steps into its source
    trajectory, and dropped otherwise. mode "backward-only" keeps just the
    backward sample (anchor last). Failures are reported per anchor without
    aborting the batch.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if attach_history and dataset is None:
        raise ValueError("attach_history requires the source dataset")
    anchor_arr = np.stack([a.state for a in anchors])
    fwd_fail: dict[int, str] = {}
    bwd_fail: dict[int, str] = {}
    if mode != "backward-only":
        rets_f = np.asarray(
            pair.ret_scale_fwd.norm(np.array([a.target_return_fwd for a in anchors]))
        )
        fwd_windows, fwd_fail = _sample_direction(
            pair, anchor_arr, rets_f, "forward", omega, seed, extrapolate
        )
    if mode != "forward-only":
        rets_b = np.asarray(
            pair.ret_scale_bwd.norm(np.array([a.target_return_bwd for a in anchors]))
        )
        bwd_windows, bwd_fail = _sample_direction(
            pair, anchor_arr, rets_b, "backward", omega, seed, extrapolate
        )

    trajs: list[StitchedStateTraj] = []
    failures: list[dict] = []
    h = pair.horizon
    for i, spec in enumerate(anchors):
        errs = [e for e in (fwd_fail.get(i), bwd_fail.get(i)) if e]
        if errs:
            failures.append({"anchor_index": i, "error": "; ".join(errs)})
            continue
        meta = {
            "mode": mode,
            "omega": omega,
            "anchor_traj": spec.traj_idx,
            "anchor_state": spec.state_idx,
        }
        if mode != "backward-only":
            meta["target_return_fwd"] = spec.target_return_fwd
        if mode != "forward-only":
            meta["target_return_bwd"] = spec.target_return_bwd
        if mode == "bidirectional":
            traj = stitch(
                StateWindow(bwd_windows[i], h - 1),
                spec.state,
                StateWindow(fwd_windows[i], 0),
            )
            traj.meta = meta
        elif mode == "backward-only":
            traj = StitchedStateTraj(bwd_windows[i].copy(), anchor_index=h - 1, meta=meta)
        elif attach_history and spec.state_idx >= h - 1:
            src = dataset.trajectories[spec.traj_idx].states()
            hist = src[spec.state_idx - h + 1 : spec.state_idx + 1]
            meta["history"] = "dataset"
            states = np.concatenate([hist[: h - 1], spec.state[None, :], fwd_windows[i][1:]])
            traj = StitchedStateTraj(states, anchor_index=h - 1, meta=meta)
        else:
            traj = StitchedStateTraj(fwd_windows[i].copy(), anchor_index=0, meta=meta)
        trajs.append(traj)
    return trajs, failures


def save_pair(pair: BiModelPair, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    nn.save_mlp(pair.fwd.mlp, out_dir / "forward.mlp.json")
    nn.save_mlp(pair.bwd.mlp, out_dir / "backward.mlp.json")
    meta = {
        "format": PAIR_FORMAT,
        "horizon": pair.horizon,
        "state_dim": pair.state_dim,
        "gamma": pair.gamma,
        "k_embed_dim": pair.fwd.k_embed_dim,
        "betas": pair.schedule.betas.tolist(),
        "stats": pair.stats.to_dict(),
        "ret_scale_fwd": [pair.ret_scale_fwd.lo, pair.ret_scale_fwd.hi],
        "ret_scale_bwd": [pair.ret_scale_bwd.lo, pair.ret_scale_bwd.hi],
    }
    (out_dir / "pair.meta.json").write_text(json.dumps(meta))


def load_pair(out_dir: str | Path) -> BiModelPair:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "pair.meta.json").read_text())
    if meta.get("format") != PAIR_FORMAT:
        raise ValueError(f"unsupported pair format {meta.get('format')!r}")
    horizon = int(meta["horizon"])
    state_dim = int(meta["state_dim"])
    kdim = int(meta["k_embed_dim"])
    fwd = Denoiser(nn.load_mlp(out_dir / "forward.mlp.json"), horizon, state_dim, kdim)
    bwd = Denoiser(nn.load_mlp(out_dir / "backward.mlp.json"), horizon, state_dim, kdim)
    return BiModelPair(
        fwd=fwd, bwd=bwd,
        schedule=NoiseSchedule(np.asarray(meta["betas"])),
        horizon=horizon, state_dim=state_dim, gamma=float(meta["gamma"]),
        stats=NormStats.from_dict(meta["stats"]),
        ret_scale_fwd=ReturnScale(*meta["ret_scale_fwd"]),
        ret_scale_bwd=ReturnScale(*meta["ret_scale_bwd"]),
    )


def write_generated(
    path: str | Path, trajs: list[StitchedStateTraj], header_extra: dict | None = None
) -> None:
    """Intermediate state-trajectory file consumed by completion."""
    path = Path(path)
    header = {"schema": GEN_SCHEMA, "count": len(trajs)}
    if header_extra:
        header.update(header_extra)
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for traj in trajs:
            rec = {
                "states": traj.states.tolist(),
                "anchor_index": traj.anchor_index,
                "meta": traj.meta,
            }
            fh.write(json.dumps(rec) + "\n")


def read_generated(path: str | Path) -> tuple[list[StitchedStateTraj], dict]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty generation file")
    header = json.loads(lines[0])
    if header.get("schema") != GEN_SCHEMA:
        raise ValueError(
            f"{path}: schema {header.get('schema')!r} not supported, expected {GEN_SCHEMA!r}"
        )
    if header.get("count") != len(lines) - 1:
        raise ValueError(
            f"{path}: header promises {header.get('count')} records, file has {len(lines) - 1}"
        )
    trajs = []
    for i, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
            trajs.append(
                StitchedStateTraj(
                    np.asarray(rec["states"], dtype=np.float64),
                    int(rec["anchor_index"]),
                    rec.get("meta", {}),
                )
            )
        except (json.JSONDecodeError, KeyError) as exc:
            raise ValueError(f"{path}: record {i} invalid: {exc}") from exc
    return trajs, header
