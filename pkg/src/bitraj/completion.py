"""Action and reward completion for generated state trajectories.

An inverse-dynamics model maps (s, s') to the action connecting them and a
reward model maps (s, a) to the scalar reward. Both are MLPs trained jointly
on the offline dataset's transitions with mean squared error. Completing a
stitched L-state trajectory yields L-1 transitions that chain by
construction, with actions clipped to the environment action box.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import NormStats, OfflineDataset, Trajectory, Transition, SOURCE_GENERATED
from .bidir import StitchedStateTraj

logger = logging.getLogger(__name__)

MODELS_FORMAT = "completion-v1"


@dataclass
class CompletionConfig:
    hidden: tuple[int, ...] = (128, 128)
    epochs: int = 300
    batch_size: int = 256
    lr: float = 1e-3
    holdout_frac: float = 0.1


@dataclass
class CompletionModels:
    idm: nn.MlpParams
    rm: nn.MlpParams
    stats: NormStats
    action_low: np.ndarray
    action_high: np.ndarray

    def __post_init__(self):
        self.action_low = np.asarray(self.action_low, dtype=np.float64)
        self.action_high = np.asarray(self.action_high, dtype=np.float64)


def _transition_arrays(dataset: OfflineDataset) -> tuple[np.ndarray, ...]:
    s = np.concatenate([t.states()[:-1] for t in dataset.trajectories])
    s2 = np.concatenate([t.states()[1:] for t in dataset.trajectories])
    a = np.concatenate([t.actions() for t in dataset.trajectories])
    r = np.concatenate([t.rewards() for t in dataset.trajectories])
    return s, a, r, s2


def regressor_loss_grads(
    params: nn.MlpParams, x: np.ndarray, y: np.ndarray
) -> tuple[float, nn.MlpGrads]:
    """Mean-per-element squared error and its parameter gradients."""
    pred = nn.forward(params, x)
    diff = pred - y
    loss = float(np.mean(diff**2))
    upstream = 2.0 * diff / diff.size
    grads = nn.backward(params, x, upstream)
    return loss, grads


def _train_regressor(
    params: nn.MlpParams,
    x: np.ndarray,
    y: np.ndarray,
    cfg: CompletionConfig,
    rng: np.random.Generator,
    tag: str,
) -> tuple[nn.MlpParams, float]:
    """Minibatch Adam on mean-per-element squared error; returns train MSE."""
    state = nn.init_optimizer(params, cfg.lr)
    n = x.shape[0]
    log_every = max(1, cfg.epochs // 5)
    last = float("nan")
    for epoch in range(cfg.epochs):
        losses = []
        for idx in nn.iter_minibatches(n, cfg.batch_size, rng):
            loss, grads = regressor_loss_grads(params, x[idx], y[idx])
            params, state = nn.sgd_step(params, state, grads)
            losses.append(loss)
        last = float(np.mean(losses))
        if (epoch + 1) % log_every == 0 or epoch == cfg.epochs - 1:
            logger.info("%s epoch %d/%d mse %.3e", tag, epoch + 1, cfg.epochs, last)
    return params, last


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


def train_models(
    dataset: OfflineDataset,
    action_low: np.ndarray,
    action_high: np.ndarray,
    cfg: CompletionConfig,
    seed: int,
) -> tuple[CompletionModels, dict]:
    """Train IDM and RM on the dataset's transitions with a held-out split."""
    s, a, r, s2 = _transition_arrays(dataset)
    stats = dataset.stats
    zs, zs2, za = stats.norm_state(s), stats.norm_state(s2), stats.norm_action(a)
    x_idm = np.concatenate([zs, zs2], axis=1)
    x_rm = np.concatenate([zs, za], axis=1)
    y_rm = r[:, None]

    n = s.shape[0]
    seeds = np.random.SeedSequence(seed).spawn(3)
    split_rng = np.random.default_rng(seeds[0])
    order = split_rng.permutation(n)
    n_hold = max(1, int(round(cfg.holdout_frac * n)))
    hold, train = order[:n_hold], order[n_hold:]
    if train.size == 0:
        raise ValueError(f"dataset too small to hold out {n_hold} of {n} transitions")

    state_dim, action_dim = s.shape[1], a.shape[1]
    idm = nn.init_mlp(
        [2 * state_dim, *cfg.hidden, action_dim], seed=int(seeds[1].generate_state(1)[0])
    )
    rm = nn.init_mlp(
        [state_dim + action_dim, *cfg.hidden, 1], seed=int(seeds[2].generate_state(1)[0])
    )
    train_rng = np.random.default_rng(seeds[0].spawn(1)[0])
    idm, idm_train_mse = _train_regressor(idm, x_idm[train], a[train], cfg, train_rng, "idm")
    rm, rm_train_mse = _train_regressor(rm, x_rm[train], y_rm[train], cfg, train_rng, "rm")

    models = CompletionModels(idm, rm, stats, action_low, action_high)
    report = {
        "n_train": int(train.size),
        "n_holdout": int(n_hold),
        "idm_train_mse": idm_train_mse,
        "idm_holdout_mse": mse(nn.forward(idm, x_idm[hold]), a[hold]),
        "rm_train_mse": rm_train_mse,
        "rm_holdout_mse": mse(nn.forward(rm, x_rm[hold]), y_rm[hold]),
    }
    logger.info(
        "completion held-out mse: idm %.3e rm %.3e",
        report["idm_holdout_mse"], report["rm_holdout_mse"],
    )
    return models, report


def idm_actions(models: CompletionModels, s: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """Inferred actions for state pairs, clipped to the action box."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(s2, dtype=np.float64))
    x = np.concatenate([models.stats.norm_state(s), models.stats.norm_state(s2)], axis=1)
    return np.clip(nn.forward(models.idm, x), models.action_low, models.action_high)


def rm_rewards(models: CompletionModels, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    x = np.concatenate([models.stats.norm_state(s), models.stats.norm_action(a)], axis=1)
    return nn.forward(models.rm, x)[:, 0]


def complete(
    traj: StitchedStateTraj, models: CompletionModels, episode_id: int = 0
) -> Trajectory:
    """Fill in actions and rewards between consecutive generated states."""
    states = traj.states
    if states.shape[0] < 2:
        raise ValueError("cannot complete a trajectory with fewer than 2 states")
    actions = idm_actions(models, states[:-1], states[1:])
    rewards = rm_rewards(models, states[:-1], actions)
    transitions = [
        Transition(states[i], actions[i], rewards[i], states[i + 1], done=False)
        for i in range(states.shape[0] - 1)
    ]
    return Trajectory(transitions, episode_id=episode_id, source=SOURCE_GENERATED)


def save_models(models: CompletionModels, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    nn.save_mlp(models.idm, out_dir / "idm.mlp.json")
    nn.save_mlp(models.rm, out_dir / "rm.mlp.json")
    meta = {
        "format": MODELS_FORMAT,
        "stats": models.stats.to_dict(),
        "action_low": models.action_low.tolist(),
        "action_high": models.action_high.tolist(),
    }
    (out_dir / "completion.meta.json").write_text(json.dumps(meta))


def load_models(out_dir: str | Path) -> CompletionModels:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "completion.meta.json").read_text())
    if meta.get("format") != MODELS_FORMAT:
        raise ValueError(f"unsupported completion format {meta.get('format')!r}")
    return CompletionModels(
        idm=nn.load_mlp(out_dir / "idm.mlp.json"),
        rm=nn.load_mlp(out_dir / "rm.mlp.json"),
        stats=NormStats.from_dict(meta["stats"]),
        action_low=np.asarray(meta["action_low"]),
        action_high=np.asarray(meta["action_high"]),
    )
