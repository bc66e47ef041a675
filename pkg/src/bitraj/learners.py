"""Offline policy learners and the rollout evaluator.

Two learners are provided: behavior cloning (MSE regression onto dataset
actions) and a trimmed TD3+BC variant with a single critic, target networks,
and an actor loss -lambda * Q(s, pi(s)) + alpha * ||pi(s) - a||^2 where
lambda normalizes the per-batch critic scale. Actors squash their outputs
with tanh so actions always land inside the environment action box.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import NormStats, OfflineDataset
from .envs import MdpSpec, initial_state, step

logger = logging.getLogger(__name__)

ALGORITHMS = ("bc", "td3bc-lite")


@dataclass
class LearnerConfig:
    hidden: tuple[int, ...] = (128, 128)
    steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    bc_weight: float = 1.0  # alpha; math.inf drops the critic term entirely
    discount: float = 0.99
    polyak: float = 0.005
    policy_delay: int = 2


@dataclass
class PolicyParams:
    actor: nn.MlpParams
    algorithm: str
    stats: NormStats
    action_low: np.ndarray
    action_high: np.ndarray
    critic: nn.MlpParams | None = None

    def __post_init__(self):
        self.action_low = np.asarray(self.action_low, dtype=np.float64)
        self.action_high = np.asarray(self.action_high, dtype=np.float64)


def _squash(out: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    center = (low + high) / 2.0
    half = (high - low) / 2.0
    return center + half * np.tanh(out)


def policy_action(policy: PolicyParams, s: np.ndarray) -> np.ndarray:
    z = policy.stats.norm_state(np.asarray(s, dtype=np.float64))
    return _squash(nn.forward(policy.actor, z), policy.action_low, policy.action_high)


def _dataset_arrays(dataset: OfflineDataset):
    s = np.concatenate([t.states()[:-1] for t in dataset.trajectories])
    a = np.concatenate([t.actions() for t in dataset.trajectories])
    r = np.concatenate([t.rewards() for t in dataset.trajectories])
    s2 = np.concatenate([t.states()[1:] for t in dataset.trajectories])
    d = np.concatenate(
        [np.array([tr.done for tr in t.transitions], dtype=np.float64) for t in dataset.trajectories]
    )
    return s, a, r, s2, d


def bc_loss_grads(
    actor: nn.MlpParams, zs: np.ndarray, a: np.ndarray, low: np.ndarray, high: np.ndarray
) -> tuple[float, nn.MlpGrads]:
    """Squared action error of the squashed policy and its actor gradients."""
    half = (high - low) / 2.0
    out = nn.forward(actor, zs)
    tanh_out = np.tanh(out)
    pred = (low + high) / 2.0 + half * tanh_out
    diff = pred - a
    loss = float(np.mean(diff**2))
    upstream = 2.0 * diff / diff.size * half * (1.0 - tanh_out**2)
    grads = nn.backward(actor, zs, upstream)
    return loss, grads


def critic_loss_grads(
    critic: nn.MlpParams, x: np.ndarray, y: np.ndarray
) -> tuple[float, nn.MlpGrads]:
    """Mean squared error against a fixed bootstrap target y and its
    critic gradients; y carries no gradient."""
    q = nn.forward(critic, x)[:, 0]
    diff = q - y
    loss = float(np.mean(diff**2))
    upstream = (2.0 * diff / q.size)[:, None]
    grads = nn.backward(critic, x, upstream)
    return loss, grads


def actor_loss_grads(
    actor: nn.MlpParams,
    critic: nn.MlpParams | None,
    zs: np.ndarray,
    a: np.ndarray,
    low: np.ndarray,
    high: np.ndarray,
    bc_weight: float,
    lam: float | None = None,
) -> tuple[float, nn.MlpGrads]:
    """Deterministic-policy objective bc_weight*MSE(action) - lam*mean(Q) and
    its actor gradients. lam is a constant scale (no gradient flows through
    it); None recomputes the running normalizer 1/(mean|Q|+1e-8) from the
    batch, and an infinite bc_weight drops the critic term entirely."""
    center = (low + high) / 2.0
    half = (high - low) / 2.0
    pure_bc = np.isinf(bc_weight)
    state_dim = zs.shape[1]
    out = nn.forward(actor, zs)
    tanh_out = np.tanh(out)
    pred = center + half * tanh_out
    diff = pred - a
    up_bc_weight = 1.0 if pure_bc else bc_weight
    loss = up_bc_weight * float(np.mean(diff**2))
    up_actor = 2.0 * up_bc_weight * diff / diff.size * half * (1.0 - tanh_out**2)
    if not pure_bc:
        b = zs.shape[0]
        x_pi = np.concatenate([zs, tanh_out], axis=1)
        q_pi = nn.forward(critic, x_pi)[:, 0]
        if lam is None:
            lam = 1.0 / (float(np.mean(np.abs(q_pi))) + 1e-8)
        ones = np.full((b, 1), 1.0 / b)
        _, dx = nn.backward_with_input(critic, x_pi, ones)
        dq_da = dx[:, state_dim:]
        up_actor = up_actor - lam * dq_da * (1.0 - tanh_out**2)
        loss -= lam * float(np.mean(q_pi))
    grads = nn.backward(actor, zs, up_actor)
    return loss, grads


def _train_bc(
    dataset: OfflineDataset,
    low: np.ndarray,
    high: np.ndarray,
    cfg: LearnerConfig,
    seed: int,
) -> PolicyParams:
    s, a, _, _, _ = _dataset_arrays(dataset)
    zs = dataset.stats.norm_state(s)
    seeds = np.random.SeedSequence(seed).spawn(2)
    actor = nn.init_mlp(
        [s.shape[1], *cfg.hidden, a.shape[1]], seed=int(seeds[0].generate_state(1)[0])
    )
    opt = nn.init_optimizer(actor, cfg.lr)
    rng = np.random.default_rng(seeds[1])
    n = s.shape[0]
    for step_i in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        loss, grads = bc_loss_grads(actor, zs[idx], a[idx], low, high)
        actor, opt = nn.sgd_step(actor, opt, grads)
        if (step_i + 1) % max(1, cfg.steps // 5) == 0:
            logger.info("bc step %d/%d mse %.3e", step_i + 1, cfg.steps, loss)
    return PolicyParams(actor, "bc", dataset.stats, low, high)


def _train_td3bc(
    dataset: OfflineDataset,
    low: np.ndarray,
    high: np.ndarray,
    cfg: LearnerConfig,
    seed: int,
) -> PolicyParams:
    s, a, r, s2, d = _dataset_arrays(dataset)
    stats = dataset.stats
    zs, zs2 = stats.norm_state(s), stats.norm_state(s2)
    center = (low + high) / 2.0
    half = (high - low) / 2.0
    a_norm = (a - center) / half

    seeds = np.random.SeedSequence(seed).spawn(3)
    state_dim, action_dim = s.shape[1], a.shape[1]
    actor = nn.init_mlp(
        [state_dim, *cfg.hidden, action_dim], seed=int(seeds[0].generate_state(1)[0])
    )
    critic = nn.init_mlp(
        [state_dim + action_dim, *cfg.hidden, 1], seed=int(seeds[1].generate_state(1)[0])
    )
    actor_t, critic_t = actor.copy(), critic.copy()
    opt_a = nn.init_optimizer(actor, cfg.lr)
    opt_c = nn.init_optimizer(critic, cfg.lr)
    rng = np.random.default_rng(seeds[2])
    n = s.shape[0]

    for step_i in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))

        # critic regression onto the one-step bootstrapped target
        a2 = np.tanh(nn.forward(actor_t, zs2[idx]))
        q2 = nn.forward(critic_t, np.concatenate([zs2[idx], a2], axis=1))[:, 0]
        y = r[idx] + cfg.discount * (1.0 - d[idx]) * q2
        x_c = np.concatenate([zs[idx], a_norm[idx]], axis=1)
        _, grads_c = critic_loss_grads(critic, x_c, y)
        critic, opt_c = nn.sgd_step(critic, opt_c, grads_c)

        if step_i % cfg.policy_delay == 0:
            _, grads_a = actor_loss_grads(
                actor, critic, zs[idx], a[idx], low, high, cfg.bc_weight
            )
            actor, opt_a = nn.sgd_step(actor, opt_a, grads_a)

            tau = cfg.polyak
            for net, target in ((actor, actor_t), (critic, critic_t)):
                for i in range(net.n_layers):
                    target.weights[i] = (1 - tau) * target.weights[i] + tau * net.weights[i]
                    target.biases[i] = (1 - tau) * target.biases[i] + tau * net.biases[i]
    return PolicyParams(actor, "td3bc-lite", stats, low, high, critic=critic)


def train_policy(
    dataset: OfflineDataset,
    algorithm: str,
    low: np.ndarray,
    high: np.ndarray,
    cfg: LearnerConfig,
    seed: int,
) -> PolicyParams:
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    if algorithm == "bc":
        return _train_bc(dataset, low, high, cfg, seed)
    if algorithm == "td3bc-lite":
        return _train_td3bc(dataset, low, high, cfg, seed)
    raise ValueError(f"unknown algorithm {algorithm!r}, expected one of {ALGORITHMS}")


POLICY_FORMAT = "policy-v1"


def save_policy(policy: PolicyParams, path: str | Path) -> None:
    """Write a versioned JSON checkpoint; float64 values round-trip exactly."""
    record = {
        "format": POLICY_FORMAT,
        "algorithm": policy.algorithm,
        "stats": policy.stats.to_dict(),
        "action_low": policy.action_low.tolist(),
        "action_high": policy.action_high.tolist(),
        "actor": nn.mlp_record(policy.actor),
        "critic": None if policy.critic is None else nn.mlp_record(policy.critic),
    }
    Path(path).write_text(json.dumps(record))


def load_policy(path: str | Path) -> PolicyParams:
    record = json.loads(Path(path).read_text())
    fmt = record.get("format")
    if fmt != POLICY_FORMAT:
        raise ValueError(f"policy format {fmt!r} not supported, expected {POLICY_FORMAT!r}")
    return PolicyParams(
        actor=nn.mlp_from_record(record["actor"]),
        algorithm=record["algorithm"],
        stats=NormStats.from_dict(record["stats"]),
        action_low=np.asarray(record["action_low"], dtype=np.float64),
        action_high=np.asarray(record["action_high"], dtype=np.float64),
        critic=None if record["critic"] is None else nn.mlp_from_record(record["critic"]),
    )


@dataclass
class EvalResult:
    mean_return: float
    success_rate: float
    episodes: int


def evaluate_policy(policy, spec: MdpSpec, episodes: int, seed: int) -> EvalResult:
    """Deterministic seeded rollouts from the env's initial distribution.

    policy may be PolicyParams or any callable state -> action. An episode
    succeeds when the state enters the goal ball within the horizon; rollouts
    stop at success.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    act = policy if callable(policy) else (lambda s: policy_action(policy, s))
    goal = np.asarray(spec.goal)
    children = np.random.SeedSequence(seed).spawn(episodes)
    returns, successes = [], 0
    for ep in range(episodes):
        rng = np.random.default_rng(children[ep])
        s = initial_state(spec, rng)
        total = 0.0
        for _ in range(spec.horizon):
            tr = step(spec, s, act(s))
            total += tr.r
            s = tr.s_next
            if float(np.linalg.norm(s - goal)) < spec.success_radius:
                successes += 1
                break
        returns.append(total)
    return EvalResult(
        mean_return=float(np.mean(returns)),
        success_rate=successes / episodes,
        episodes=episodes,
    )
