"""Quality metrics for generated trajectories.

dynamic_error replays each completed action through the true environment
dynamics and sums the Euclidean gaps to the generated next states; it is
exactly zero on trajectories the environment itself produced. l2_distance is
the minimum, over all equal-length contiguous state windows of the dataset,
of the summed per-state Euclidean distance; it measures how far a generated
trajectory strays from anything the dataset already contains.
"""

from __future__ import annotations

import logging

import numpy as np

from .data import OfflineDataset, Trajectory
from .envs import MdpSpec, step

logger = logging.getLogger(__name__)


def dynamic_error(traj: Trajectory, spec: MdpSpec) -> float:
    """Sum over transitions of || s_next - step(spec, s, a).s_next ||_2."""
    states = traj.states()
    if states.shape[1] != spec.state_dim:
        raise ValueError(
            f"trajectory has state dim {states.shape[1]}, env expects {spec.state_dim}"
        )
    total = 0.0
    for tr in traj.transitions:
        replayed = step(spec, tr.s, tr.a).s_next
        total += float(np.linalg.norm(tr.s_next - replayed))
    return total


def l2_distance(traj: Trajectory, dataset: OfflineDataset) -> float:
    """Minimum summed state distance to any equal-length dataset window."""
    target = traj.states()
    length = target.shape[0]
    best = np.inf
    for source in dataset.trajectories:
        states = source.states()
        n_windows = states.shape[0] - length + 1
        if n_windows < 1:
            continue
        # one pass per offset keeps memory flat; window counts are small
        for off in range(n_windows):
            d = float(np.sum(np.linalg.norm(states[off : off + length] - target, axis=1)))
            if d < best:
                best = d
    if not np.isfinite(best):
        raise ValueError(
            f"dataset contains no window of {length} states to compare against"
        )
    return best
