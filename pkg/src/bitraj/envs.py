"""Deterministic toy MDPs and scripted collection policies.

Two environments are registered:

* ``point-reach``: 2-D position state in [0,1]^2, velocity action clipped to
  [-0.1, 0.1]^2, unit-gain integrator dynamics, an interior wall at x=0.5
  with a gap around y=0.5, reward = -distance of the post-move position to
  the goal. ``point-reach-open`` is the same box without the wall.
* ``chain-1d``: 1-D position in [0, 10] with action in [-1, 1]; scripted
  policies move in integer steps so states stay on grid points.

The scripted policies produce a deliberately disconnected dataset: mode A
patrols between its start band and the corridor midpoint, mode B walks from
the corridor to the goal. Both visit the corridor midpoint; no episode covers
start-to-goal end to end.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import OfflineDataset, Trajectory, Transition

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MdpSpec:
    """Immutable description of a registered MDP."""

    name: str
    state_dim: int
    action_dim: int
    gamma: float
    horizon: int
    dynamics_id: str
    reward_id: str
    init_id: str
    state_low: tuple[float, ...]
    state_high: tuple[float, ...]
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    goal: tuple[float, ...]
    success_radius: float
    # (wall_x, gap_low, gap_high) or None for wall-free dynamics
    wall: tuple[float, float, float] | None = None


_POINT_REACH = MdpSpec(
    name="point-reach",
    state_dim=2,
    action_dim=2,
    gamma=0.99,
    horizon=50,
    dynamics_id="integrator-wall",
    reward_id="neg-goal-dist",
    init_id="left-band",
    state_low=(0.0, 0.0),
    state_high=(1.0, 1.0),
    action_low=(-0.1, -0.1),
    action_high=(0.1, 0.1),
    goal=(0.9, 0.5),
    success_radius=0.05,
    wall=(0.5, 0.35, 0.65),
)

_POINT_REACH_OPEN = MdpSpec(
    name="point-reach-open",
    state_dim=2,
    action_dim=2,
    gamma=0.99,
    horizon=50,
    dynamics_id="integrator-wall",
    reward_id="neg-goal-dist",
    init_id="uniform-box",
    state_low=(0.0, 0.0),
    state_high=(1.0, 1.0),
    action_low=(-0.1, -0.1),
    action_high=(0.1, 0.1),
    goal=(0.9, 0.5),
    success_radius=0.05,
    wall=None,
)

_CHAIN_1D = MdpSpec(
    name="chain-1d",
    state_dim=1,
    action_dim=1,
    gamma=0.99,
    horizon=30,
    dynamics_id="integrator-wall",
    reward_id="neg-goal-dist-scaled",
    init_id="chain-left",
    state_low=(0.0,),
    state_high=(10.0,),
    action_low=(-1.0,),
    action_high=(1.0,),
    goal=(10.0,),
    success_radius=0.5,
    wall=None,
)

_REGISTRY = {s.name: s for s in (_POINT_REACH, _POINT_REACH_OPEN, _CHAIN_1D)}


def env_names() -> list[str]:
    return sorted(_REGISTRY)


def get_spec(name: str) -> MdpSpec:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown env {name!r}, registered: {env_names()}") from None


def action_box(spec: MdpSpec) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(spec.action_low), np.asarray(spec.action_high)


def clip_action(spec: MdpSpec, a: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(a, dtype=np.float64), spec.action_low, spec.action_high)


def clip_state(spec: MdpSpec, s: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(s, dtype=np.float64), spec.state_low, spec.state_high)


def _wall_blocked(spec: MdpSpec, s: np.ndarray, p: np.ndarray) -> bool:
    """True when the straight move s -> p crosses the wall outside its gap.

    A move is a crossing only when the endpoints sit strictly on opposite
    sides of the wall plane, so standing exactly on the plane never blocks.
    Blocked moves cancel entirely (position unchanged).
    """
    if spec.wall is None:
        return False
    wall_x, gap_lo, gap_hi = spec.wall
    d0 = s[0] - wall_x
    d1 = p[0] - wall_x
    if d0 * d1 >= 0.0:
        return False
    y_cross = s[1] + (p[1] - s[1]) * (wall_x - s[0]) / (p[0] - s[0])
    return not (gap_lo <= y_cross <= gap_hi)


def _reward(spec: MdpSpec, s_next: np.ndarray) -> float:
    dist = float(np.linalg.norm(s_next - np.asarray(spec.goal)))
    if spec.reward_id == "neg-goal-dist":
        return -dist
    if spec.reward_id == "neg-goal-dist-scaled":
        span = float(np.linalg.norm(np.asarray(spec.state_high) - np.asarray(spec.state_low)))
        return -dist / span
    raise ValueError(f"unknown reward id {spec.reward_id!r}")


def step(spec: MdpSpec, s: np.ndarray, a: np.ndarray) -> Transition:
    """Pure deterministic transition; state and action are clipped on entry."""
    s = clip_state(spec, s)
    a = clip_action(spec, a)
    proposed = clip_state(spec, s + a)
    s_next = s.copy() if _wall_blocked(spec, s, proposed) else proposed
    return Transition(s, a, _reward(spec, s_next), s_next, done=False)


def initial_state(spec: MdpSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.init_id == "left-band":
        return np.array([0.1, rng.uniform(0.4, 0.6)])
    if spec.init_id == "uniform-box":
        lo = np.asarray(spec.state_low) + 0.05
        hi = np.asarray(spec.state_high) - 0.05
        return rng.uniform(lo, hi)
    if spec.init_id == "chain-left":
        return np.array([float(rng.integers(0, 3))])
    raise ValueError(f"unknown init id {spec.init_id!r}")


def corridor_center(spec: MdpSpec) -> np.ndarray:
    if spec.state_dim == 2:
        return np.array([0.5, 0.5])
    return np.array([5.0])


def in_corridor(spec: MdpSpec, states: np.ndarray) -> np.ndarray | bool:
    """Boolean mask of states inside the shared corridor region.

    A single state (1-D input) yields a plain bool; a batch yields a mask."""
    arr = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if spec.state_dim == 2:
        out = (np.abs(arr[:, 0] - 0.5) <= 0.05) & (np.abs(arr[:, 1] - 0.5) <= 0.15)
    else:
        out = np.abs(arr[:, 0] - 5.0) <= 0.5
    return bool(out[0]) if np.asarray(states).ndim == 1 else out


def in_mode_a_exclusive(spec: MdpSpec, states: np.ndarray) -> np.ndarray | bool:
    arr = np.atleast_2d(np.asarray(states, dtype=np.float64))
    threshold = 0.45 if spec.state_dim == 2 else 4.5
    out = arr[:, 0] < threshold
    return bool(out[0]) if np.asarray(states).ndim == 1 else out


def in_mode_b_exclusive(spec: MdpSpec, states: np.ndarray) -> np.ndarray | bool:
    arr = np.atleast_2d(np.asarray(states, dtype=np.float64))
    threshold = 0.55 if spec.state_dim == 2 else 5.5
    out = arr[:, 0] > threshold
    return bool(out[0]) if np.asarray(states).ndim == 1 else out


class ModeAPatrol:
    """Shuttles between its episode start and the corridor midpoint.

    Each leg moves with per-component max-speed actions whose final step lands
    exactly on the waypoint (the waypoint components stay inside a binade of
    the current position, so the subtraction is exact). The policy holds at
    the corridor for a few steps before heading back, then repeats until the
    horizon. It never enters the far half of the space.
    """

    dwell_steps = 3

    def reset(self, spec: MdpSpec, rng: np.random.Generator) -> np.ndarray:
        self._start = initial_state(spec, rng)
        self._target = corridor_center(spec)
        self._dwell_left = 0
        return self._start.copy()

    def act(self, spec: MdpSpec, s: np.ndarray, t: int) -> np.ndarray:
        if self._dwell_left > 0:
            self._dwell_left -= 1
            if self._dwell_left == 0:
                self._target = self._start
            return np.zeros(spec.action_dim)
        diff = self._target - s
        a = clip_action(spec, diff)
        if np.all(np.abs(diff) <= np.asarray(spec.action_high)):
            # this action lands on the waypoint; plan the next leg
            if np.array_equal(self._target, corridor_center(spec)):
                self._dwell_left = self.dwell_steps
            else:
                self._target = corridor_center(spec)
        return a


class ModeBGoal:
    """Starts at the corridor midpoint, walks to the goal, then holds."""

    def reset(self, spec: MdpSpec, rng: np.random.Generator) -> np.ndarray:
        return corridor_center(spec)

    def act(self, spec: MdpSpec, s: np.ndarray, t: int) -> np.ndarray:
        return clip_action(spec, np.asarray(spec.goal) - s)


class GoalSeeker:
    """Greedy controller heading straight to the goal; optimal without walls."""

    def reset(self, spec: MdpSpec, rng: np.random.Generator) -> np.ndarray:
        return initial_state(spec, rng)

    def act(self, spec: MdpSpec, s: np.ndarray, t: int) -> np.ndarray:
        return clip_action(spec, np.asarray(spec.goal) - s)


_POLICIES: dict[str, Callable[[], object]] = {
    "mode-a-patrol": ModeAPatrol,
    "mode-b-goal": ModeBGoal,
    "goal-seeker": GoalSeeker,
}


def policy_names() -> list[str]:
    return sorted(_POLICIES)


def make_policy(policy_id: str):
    try:
        return _POLICIES[policy_id]()
    except KeyError:
        raise ValueError(f"unknown policy {policy_id!r}, registered: {policy_names()}") from None


def collect(
    spec: MdpSpec,
    policy_id: str,
    episodes: int,
    seed: int,
    max_steps: int | None = None,
    episode_id_start: int = 0,
) -> list[Trajectory]:
    """Roll a scripted policy; bit-identical for a fixed seed."""
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    max_steps = spec.horizon if max_steps is None else max_steps
    if max_steps < 1:
        raise ValueError(f"max_steps must be >= 1, got {max_steps}")
    children = np.random.SeedSequence(seed).spawn(episodes)
    trajectories = []
    for ep in range(episodes):
        rng = np.random.default_rng(children[ep])
        policy = make_policy(policy_id)
        s = policy.reset(spec, rng)
        transitions = []
        for t in range(max_steps):
            a = policy.act(spec, s, t)
            tr = step(spec, s, a)
            transitions.append(tr)
            s = tr.s_next
        trajectories.append(Trajectory(transitions, episode_id=episode_id_start + ep))
    return trajectories


# mode-B episodes are shorter than the horizon but must still be long enough
# to contain full stitched-length windows (2H-1 states at the default H=8)
MODE_B_STEPS = {"point-reach": 20, "chain-1d": 15}


def collect_two_mode(
    spec: MdpSpec, episodes_a: int, episodes_b: int, seed: int
) -> OfflineDataset:
    """The disconnected-modes dataset: patrol episodes plus corridor-to-goal
    episodes, merged with shared normalization statistics."""
    steps_b = MODE_B_STEPS.get(spec.name, spec.horizon)
    trajs = collect(spec, "mode-a-patrol", episodes_a, seed)
    trajs += collect(
        spec, "mode-b-goal", episodes_b, seed + 1,
        max_steps=steps_b, episode_id_start=episodes_a,
    )
    return OfflineDataset.from_trajectories(trajs, env_name=spec.name)
