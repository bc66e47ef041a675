"""Offline trajectory datasets: containers, directional window returns,
normalization statistics, and a versioned JSON-lines file format.

A trajectory with n transitions spans n+1 states; consecutive transitions
chain exactly (transition i's next state is transition i+1's state, bitwise).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "v1"
STD_FLOOR = 1e-6

SOURCE_ORIGINAL = "original"
SOURCE_GENERATED = "generated"


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool = False

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.s_next = np.asarray(self.s_next, dtype=np.float64)
        self.r = float(self.r)
        self.done = bool(self.done)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Transition):
            return NotImplemented
        return (
            np.array_equal(self.s, other.s)
            and np.array_equal(self.a, other.a)
            and self.r == other.r
            and np.array_equal(self.s_next, other.s_next)
            and self.done == other.done
        )


@dataclass
class Trajectory:
    transitions: list[Transition]
    episode_id: int = 0
    source: str = SOURCE_ORIGINAL

    def __post_init__(self):
        if not self.transitions:
            raise ValueError("a trajectory needs at least one transition")
        if self.source not in (SOURCE_ORIGINAL, SOURCE_GENERATED):
            raise ValueError(f"unknown source tag {self.source!r}")
        for i in range(len(self.transitions) - 1):
            if not np.array_equal(self.transitions[i].s_next, self.transitions[i + 1].s):
                raise ValueError(
                    f"episode {self.episode_id}: transition {i} does not chain to {i + 1}"
                )

    @property
    def n_states(self) -> int:
        return len(self.transitions) + 1

    def states(self) -> np.ndarray:
        """All n+1 visited states as a (n_states, state_dim) array."""
        rows = [t.s for t in self.transitions] + [self.transitions[-1].s_next]
        return np.stack(rows)

    def actions(self) -> np.ndarray:
        return np.stack([t.a for t in self.transitions])

    def rewards(self) -> np.ndarray:
        return np.array([t.r for t in self.transitions])

    def reward_sum(self) -> float:
        return float(sum(t.r for t in self.transitions))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.episode_id == other.episode_id
            and self.source == other.source
            and len(self.transitions) == len(other.transitions)
            and all(a == b for a, b in zip(self.transitions, other.transitions))
        )


@dataclass
class NormStats:
    """Per-dimension z-score statistics shared by every consumer of a dataset."""

    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    reward_mean: float
    reward_std: float

    def __post_init__(self):
        self.state_mean = np.asarray(self.state_mean, dtype=np.float64)
        self.state_std = np.asarray(self.state_std, dtype=np.float64)
        self.action_mean = np.asarray(self.action_mean, dtype=np.float64)
        self.action_std = np.asarray(self.action_std, dtype=np.float64)
        if np.any(self.state_std < STD_FLOOR) or np.any(self.action_std < STD_FLOOR):
            raise ValueError(f"stds must be floored at {STD_FLOOR}")

    def norm_state(self, s: np.ndarray) -> np.ndarray:
        return (np.asarray(s, dtype=np.float64) - self.state_mean) / self.state_std

    def denorm_state(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.state_std + self.state_mean

    def norm_action(self, a: np.ndarray) -> np.ndarray:
        return (np.asarray(a, dtype=np.float64) - self.action_mean) / self.action_std

    def to_dict(self) -> dict:
        return {
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
            "action_mean": self.action_mean.tolist(),
            "action_std": self.action_std.tolist(),
            "reward_mean": self.reward_mean,
            "reward_std": self.reward_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            state_mean=d["state_mean"], state_std=d["state_std"],
            action_mean=d["action_mean"], action_std=d["action_std"],
            reward_mean=float(d["reward_mean"]), reward_std=float(d["reward_std"]),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, NormStats):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def compute_stats(trajectories: list[Trajectory]) -> NormStats:
    states = np.concatenate([t.states() for t in trajectories])
    actions = np.concatenate([t.actions() for t in trajectories])
    rewards = np.concatenate([t.rewards() for t in trajectories])
    return NormStats(
        state_mean=states.mean(axis=0),
        state_std=np.maximum(states.std(axis=0), STD_FLOOR),
        action_mean=actions.mean(axis=0),
        action_std=np.maximum(actions.std(axis=0), STD_FLOOR),
        reward_mean=float(rewards.mean()),
        reward_std=float(max(rewards.std(), STD_FLOOR)),
    )


@dataclass
class OfflineDataset:
    trajectories: list[Trajectory]
    stats: NormStats
    env_name: str | None = None

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("dataset must contain at least one trajectory")

    @classmethod
    def from_trajectories(
        cls, trajectories: list[Trajectory], env_name: str | None = None
    ) -> "OfflineDataset":
        return cls(trajectories, compute_stats(trajectories), env_name)

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)

    def n_transitions(self) -> int:
        return sum(len(t.transitions) for t in self.trajectories)

    def all_states(self) -> np.ndarray:
        return np.concatenate([t.states() for t in self.trajectories])

    def merge(self, extra: list[Trajectory], keep_stats: bool = True) -> "OfflineDataset":
        """Union with extra trajectories. keep_stats reuses this dataset's
        normalization so models trained against it stay consistent."""
        trajs = self.trajectories + extra
        stats = self.stats if keep_stats else compute_stats(trajs)
        return OfflineDataset(trajs, stats, self.env_name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return (
            self.env_name == other.env_name
            and self.stats == other.stats
            and len(self.trajectories) == len(other.trajectories)
            and all(a == b for a, b in zip(self.trajectories, other.trajectories))
        )


def window_return(
    traj: Trajectory, t: int, window: int, gamma: float, direction: str
) -> float:
    """Discounted return of the window-1 rewards inside an H-state window.

    forward: rewards r_t .. r_{t+H-2}, discounted away from the anchor at the
    window start. backward: rewards r_{t-H+1} .. r_{t-1}, discounted away from
    the anchor at the window end (r_{t-1} undiscounted).
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    n = len(traj.transitions)
    if direction == "forward":
        if t < 0 or t + window - 1 > n:
            raise ValueError(
                f"forward window [{t}, {t + window - 1}] out of range for {n + 1} states"
            )
        rewards = [traj.transitions[i].r for i in range(t, t + window - 1)]
    elif direction == "backward":
        if t - window + 1 < 0 or t > n:
            raise ValueError(
                f"backward window [{t - window + 1}, {t}] out of range for {n + 1} states"
            )
        rewards = [traj.transitions[i].r for i in range(t - 1, t - window, -1)]
    else:
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    total = 0.0
    for r in reversed(rewards):
        total = r + gamma * total
    return total


def _traj_record(traj: Trajectory) -> dict:
    states = traj.states()
    return {
        "episode_id": traj.episode_id,
        "source": traj.source,
        "states": states.tolist(),
        "actions": traj.actions().tolist(),
        "rewards": traj.rewards().tolist(),
        "dones": [t.done for t in traj.transitions],
    }


def _traj_from_record(rec: dict, index: int) -> Trajectory:
    try:
        states = np.asarray(rec["states"], dtype=np.float64)
        actions = np.asarray(rec["actions"], dtype=np.float64)
        rewards = rec["rewards"]
        dones = rec["dones"]
        episode_id = int(rec["episode_id"])
        source = rec["source"]
    except KeyError as exc:
        raise ValueError(f"record {index}: missing field {exc}") from exc
    n = len(states) - 1
    if not (len(actions) == len(rewards) == len(dones) == n):
        raise ValueError(
            f"record {index}: {len(states)} states need {n} actions/rewards/dones, "
            f"got {len(actions)}/{len(rewards)}/{len(dones)}"
        )
    transitions = [
        Transition(states[i], actions[i], rewards[i], states[i + 1], dones[i])
        for i in range(n)
    ]
    return Trajectory(transitions, episode_id=episode_id, source=source)


def save_dataset(dataset: OfflineDataset, path: str | Path) -> None:
    """One header line plus one JSON record per trajectory."""
    path = Path(path)
    header = {
        "schema": SCHEMA_VERSION,
        "env": dataset.env_name,
        "n_trajectories": dataset.n_trajectories,
        "stats": dataset.stats.to_dict(),
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for traj in dataset.trajectories:
            fh.write(json.dumps(_traj_record(traj)) + "\n")


def load_dataset(path: str | Path) -> OfflineDataset:
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt header: {exc}") from exc
    schema = header.get("schema")
    if schema != SCHEMA_VERSION:
        raise ValueError(f"{path}: schema {schema!r} not supported, expected {SCHEMA_VERSION!r}")
    expected = int(header["n_trajectories"])
    if len(lines) - 1 != expected:
        raise ValueError(
            f"{path}: header promises {expected} trajectories, file has {len(lines) - 1}"
        )
    trajectories = []
    for i, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: record {i} is not valid JSON: {exc}") from exc
        trajectories.append(_traj_from_record(rec, i))
    stats = NormStats.from_dict(header["stats"])
    return OfflineDataset(trajectories, stats, header.get("env"))


def save_trajectories(
    trajectories: list[Trajectory], path: str | Path, env_name: str | None = None
) -> None:
    """Bare trajectory list (possibly empty): header line plus one record each."""
    path = Path(path)
    header = {
        "schema": SCHEMA_VERSION,
        "env": env_name,
        "n_trajectories": len(trajectories),
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for traj in trajectories:
            fh.write(json.dumps(_traj_record(traj)) + "\n")


def load_trajectories(path: str | Path) -> list[Trajectory]:
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty trajectory file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt header: {exc}") from exc
    schema = header.get("schema")
    if schema != SCHEMA_VERSION:
        raise ValueError(f"{path}: schema {schema!r} not supported, expected {SCHEMA_VERSION!r}")
    expected = int(header["n_trajectories"])
    if len(lines) - 1 != expected:
        raise ValueError(
            f"{path}: header promises {expected} trajectories, file has {len(lines) - 1}"
        )
    return [_traj_from_record(json.loads(line), i) for i, line in enumerate(lines[1:])]
