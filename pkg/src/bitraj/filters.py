"""Two-stage plausibility filtering of completed generated trajectories.

Stage one scores every trajectory by the summed isolation-forest anomaly of
its states (fitted on the original dataset's states) and keeps the C_ood
least anomalous. Stage two keeps the C_greedy highest undiscounted reward
sums among the survivors. Both stages break ties by generation index and
preserve the input order of the kept trajectories.

The isolation forest is implemented directly: axis-aligned random splits on
subsamples, height limit ceil(log2(m)), and the standard path-length
normalization c(n) = 2 H(n-1) - 2 (n-1)/n with H the harmonic number.
Anomaly score of a point is 2 ** (-E[path length] / c(m)).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import Trajectory

logger = logging.getLogger(__name__)


@lru_cache(maxsize=None)
def harmonic(n: int) -> float:
    if n < 1:
        raise ValueError(f"harmonic number needs n >= 1, got {n}")
    return float(np.sum(1.0 / np.arange(1, n + 1)))


def average_path_length(n: int) -> float:
    """c(n): expected unsuccessful-search path length in a BST of n points."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


@dataclass
class IsoNode:
    size: int
    feature: int = -1
    threshold: float = 0.0
    left: "IsoNode | None" = None
    right: "IsoNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class IsolationForest:
    trees: list[IsoNode]
    subsample_size: int
    height_limit: int


def _grow(x: np.ndarray, depth: int, limit: int, rng: np.random.Generator) -> IsoNode:
    n = x.shape[0]
    if depth >= limit or n <= 1:
        return IsoNode(size=n)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    varying = np.nonzero(hi > lo)[0]
    if varying.size == 0:
        # duplicate points: no split possible, leaf absorbs them all
        return IsoNode(size=n)
    q = int(rng.choice(varying))
    t = float(rng.uniform(lo[q], hi[q]))
    if not lo[q] < t < hi[q]:
        return IsoNode(size=n)
    mask = x[:, q] < t
    return IsoNode(
        size=n,
        feature=q,
        threshold=t,
        left=_grow(x[mask], depth + 1, limit, rng),
        right=_grow(x[~mask], depth + 1, limit, rng),
    )


def fit_forest(
    states: np.ndarray,
    n_trees: int = 100,
    subsample: int = 256,
    seed: int = 0,
) -> IsolationForest:
    """Fit on the original dataset's states. subsample clamps to the number
    of available states; sampling is without replacement."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] < 2:
        raise ValueError(f"need at least 2 states to fit, got {states.shape[0]}")
    if n_trees < 1:
        raise ValueError(f"n_trees must be >= 1, got {n_trees}")
    if subsample < 2:
        raise ValueError(f"subsample must be >= 2, got {subsample}")
    m = min(subsample, states.shape[0])
    limit = math.ceil(math.log2(m))
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n_trees):
        idx = rng.choice(states.shape[0], size=m, replace=False)
        trees.append(_grow(states[idx], 0, limit, rng))
    return IsolationForest(trees=trees, subsample_size=m, height_limit=limit)


def path_length(tree: IsoNode, point: np.ndarray) -> float:
    """Traversal depth plus the subtree-size adjustment at the leaf."""
    node = tree
    depth = 0.0
    while not node.is_leaf:
        node = node.left if point[node.feature] < node.threshold else node.right
        depth += 1.0
    return depth + average_path_length(node.size)


def anomaly_scores(forest: IsolationForest, states: np.ndarray) -> np.ndarray:
    """Per-state scores in (0, 1); higher is more anomalous."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    denom = average_path_length(forest.subsample_size)
    mean_paths = np.array(
        [
            np.mean([path_length(tree, s) for tree in forest.trees])
            for s in states
        ]
    )
    return 2.0 ** (-mean_paths / denom)


def trajectory_score(
    forest: IsolationForest, traj: Trajectory, include_final: bool = True
) -> float:
    """Summed state anomaly. include_final=False drops the last state,
    matching the variant that scores only the window-interior states."""
    states = traj.states()
    if not include_final:
        states = states[:-1]
    return float(np.sum(anomaly_scores(forest, states)))


def ood_keep_indices(scores: np.ndarray, c_ood: int) -> list[int]:
    """Indices of the c_ood smallest scores, ties broken by input index."""
    if c_ood < 0:
        raise ValueError(f"c_ood must be >= 0, got {c_ood}")
    order = np.argsort(scores, kind="stable")
    return sorted(int(i) for i in order[:c_ood])


def greedy_keep_indices(reward_sums: np.ndarray, c_greedy: int) -> list[int]:
    """Indices of the c_greedy largest reward sums, ties broken by index."""
    if c_greedy < 0:
        raise ValueError(f"c_greedy must be >= 0, got {c_greedy}")
    order = np.argsort(-np.asarray(reward_sums, dtype=np.float64), kind="stable")
    return sorted(int(i) for i in order[:c_greedy])


def ood_filter(
    forest: IsolationForest,
    trajs: list[Trajectory],
    c_ood: int,
    include_final: bool = True,
) -> list[Trajectory]:
    """Keep the c_ood least anomalous trajectories in their original order."""
    scores = np.array([trajectory_score(forest, t, include_final) for t in trajs])
    return [trajs[i] for i in ood_keep_indices(scores, c_ood)]


def greedy_filter(trajs: list[Trajectory], c_greedy: int) -> list[Trajectory]:
    """Keep the c_greedy highest undiscounted reward sums, original order."""
    sums = np.array([t.reward_sum() for t in trajs])
    return [trajs[i] for i in greedy_keep_indices(sums, c_greedy)]


def default_counts(n_generated: int) -> tuple[int, int]:
    """Default stage budgets: keep half after the anomaly stage, a quarter
    overall."""
    return math.ceil(0.5 * n_generated), math.ceil(0.25 * n_generated)


def clamp_counts(n_generated: int, c_ood: int, c_greedy: int) -> tuple[int, int]:
    """Enforce c_greedy <= c_ood <= n_generated."""
    c_ood = min(c_ood, n_generated)
    c_greedy = min(c_greedy, c_ood)
    return c_ood, c_greedy
