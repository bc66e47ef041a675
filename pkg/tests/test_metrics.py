"""Replay-gap and nearest-window metric tests against exhaustive oracles."""

import numpy as np
import pytest

from bitraj import envs, metrics
from bitraj.data import OfflineDataset, Trajectory, Transition


def collected_dataset(seed=0, episodes=4):
    spec = envs.get_spec("point-reach")
    trajs = envs.collect(spec, "mode-a-patrol", episodes=episodes, seed=seed)
    return spec, OfflineDataset.from_trajectories(trajs, env_name=spec.name)


def test_dynamic_error_zero_on_originals():
    spec, ds = collected_dataset()
    for traj in ds.trajectories:
        assert metrics.dynamic_error(traj, spec) == 0.0


def test_dynamic_error_counts_every_gap():
    spec = envs.get_spec("point-reach-open")
    rng = np.random.default_rng(1)
    # fabricate a chain whose recorded next states are off by known offsets
    s = rng.uniform(0.2, 0.8, 2)
    transitions = []
    expected = 0.0
    for i in range(5):
        a = rng.uniform(-0.1, 0.1, 2)
        true_next = envs.step(spec, s, a).s_next
        offset = np.full(2, 1e-3 * (i + 1))
        fake_next = true_next + offset
        transitions.append(Transition(s, a, 0.0, fake_next))
        expected += float(np.linalg.norm(offset))
        s = fake_next
    traj = Trajectory(transitions)
    assert metrics.dynamic_error(traj, spec) == pytest.approx(expected, rel=1e-9)


def test_dynamic_error_checks_state_dim():
    spec = envs.get_spec("chain-1d")
    traj = Trajectory([Transition([0.1, 0.2], [0.0, 0.0], 0.0, [0.2, 0.3])])
    with pytest.raises(ValueError, match="state dim"):
        metrics.dynamic_error(traj, spec)


def test_l2_distance_zero_for_copied_window():
    _, ds = collected_dataset()
    src = ds.trajectories[1]
    sub = Trajectory(src.transitions[3:8])
    assert metrics.l2_distance(sub, ds) == 0.0


def test_l2_distance_matches_exhaustive_scan_oracle():
    """Twenty trajectories, full double-loop recomputation, 1e-9 agreement."""
    spec = envs.get_spec("point-reach")
    trajs = envs.collect(spec, "mode-a-patrol", episodes=10, seed=3)
    trajs += envs.collect(spec, "mode-b-goal", episodes=10, seed=4, max_steps=20)
    ds = OfflineDataset.from_trajectories(trajs, env_name=spec.name)

    rng = np.random.default_rng(5)
    for length in (1, 3, 7):
        query_states = rng.uniform(0.0, 1.0, size=(length, 2))
        query = (
            Trajectory(
                [
                    Transition(query_states[i], np.zeros(2), 0.0, query_states[i + 1])
                    for i in range(length - 1)
                ]
            )
            if length > 1
            else None
        )
        if query is None:
            continue
        got = metrics.l2_distance(query, ds)
        best = np.inf
        for source in ds.trajectories:
            states = source.states()
            for off in range(states.shape[0] - length + 1):
                total = 0.0
                for j in range(length):
                    total += float(
                        np.sqrt(np.sum((states[off + j] - query_states[j]) ** 2))
                    )
                best = min(best, total)
        assert got == pytest.approx(best, abs=1e-9)


def test_l2_distance_requires_long_enough_window():
    spec = envs.get_spec("point-reach")
    short = envs.collect(spec, "mode-b-goal", episodes=2, seed=6, max_steps=5)
    ds = OfflineDataset.from_trajectories(short, env_name=spec.name)
    rng = np.random.default_rng(7)
    states = rng.uniform(0, 1, (10, 2))
    long_query = Trajectory(
        [Transition(states[i], np.zeros(2), 0.0, states[i + 1]) for i in range(9)]
    )
    with pytest.raises(ValueError, match="no window of 10 states"):
        metrics.l2_distance(long_query, ds)


def test_l2_distance_single_known_case():
    """Hand-built two-trajectory dataset with a known nearest window."""
    mk = lambda pts: Trajectory(
        [
            Transition(pts[i], np.zeros(1), 0.0, pts[i + 1])
            for i in range(len(pts) - 1)
        ]
    )
    d1 = mk([[0.0], [1.0], [2.0], [3.0]])
    d2 = mk([[10.0], [11.0], [12.0]])
    ds = OfflineDataset.from_trajectories([d1, d2])
    query = mk([[1.1], [2.1]])
    # nearest window is [1, 2]: |1.1-1| + |2.1-2| = 0.2
    assert metrics.l2_distance(query, ds) == pytest.approx(0.2, abs=1e-12)
