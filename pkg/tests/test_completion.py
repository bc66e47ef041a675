"""Action/reward completion tests: counts, chaining, clipping, and fidelity."""

import numpy as np
import pytest

from bitraj import completion, envs, nn
from bitraj.bidir import StitchedStateTraj
from bitraj.data import OfflineDataset, Trajectory, SOURCE_GENERATED


def pair_dataset(n, seed, spec):
    """Independent one-step episodes with uniform states and actions."""
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(n):
        s = rng.uniform(0.05, 0.95, 2)
        a = rng.uniform(-0.1, 0.1, 2)
        trajs.append(Trajectory([envs.step(spec, s, a)], episode_id=i))
    return OfflineDataset.from_trajectories(trajs, env_name=spec.name)


@pytest.fixture(scope="module")
def trained():
    spec = envs.get_spec("point-reach-open")
    ds = pair_dataset(1000, 0, spec)
    cfg = completion.CompletionConfig(hidden=(48, 48), epochs=60, batch_size=256, lr=2e-3)
    models, report = completion.train_models(ds, *envs.action_box(spec), cfg, seed=1)
    return spec, models, report


def make_stitched(n_states, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    return StitchedStateTraj(rng.uniform(0.1, 0.9, (n_states, dim)), anchor_index=n_states // 2)


@pytest.mark.parametrize("horizon", [2, 4, 8])
def test_complete_transition_count(trained, horizon):
    _, models, _ = trained
    traj = make_stitched(2 * horizon - 1, seed=horizon)
    out = completion.complete(traj, models, episode_id=3)
    assert len(out.transitions) == 2 * horizon - 2
    assert out.episode_id == 3
    assert out.source == SOURCE_GENERATED
    assert all(not t.done for t in out.transitions)
    # states are passed through untouched, so the chain is the input chain
    assert np.array_equal(out.states(), traj.states)


def test_complete_rejects_single_state(trained):
    _, models, _ = trained
    with pytest.raises(ValueError, match="fewer than 2"):
        completion.complete(StitchedStateTraj(np.zeros((1, 2)), 0), models)


def test_actions_clipped_to_box(trained):
    spec, models, _ = trained
    # force a far jump the box cannot produce: prediction must be clipped
    states = np.array([[0.1, 0.1], [0.9, 0.9]])
    acts = completion.idm_actions(models, states[:-1], states[1:])
    low, high = envs.action_box(spec)
    assert np.all(acts >= low) and np.all(acts <= high)


def test_idm_replay_fidelity_on_wall_free_env(trained):
    """Replaying inferred actions reproduces fresh targets within 1e-2."""
    spec, models, _ = trained
    rng = np.random.default_rng(99)
    ok = 0
    n = 300
    for _ in range(n):
        s = rng.uniform(0.05, 0.95, 2)
        a = rng.uniform(-0.1, 0.1, 2)
        s2 = envs.step(spec, s, a).s_next
        a_hat = completion.idm_actions(models, s, s2)[0]
        s2_hat = envs.step(spec, s, a_hat).s_next
        ok += np.linalg.norm(s2_hat - s2) <= 1e-2
    assert ok / n >= 0.95


def test_reward_model_beats_constant_predictor(trained):
    spec, models, report = trained
    ds = pair_dataset(400, 7, spec)
    s = np.concatenate([t.states()[:-1] for t in ds.trajectories])
    a = np.concatenate([t.actions() for t in ds.trajectories])
    r = np.concatenate([t.rewards() for t in ds.trajectories])
    pred = completion.rm_rewards(models, s, a)
    rm_mse = completion.mse(pred, r)
    const_mse = float(np.var(r))
    assert rm_mse < 0.05 * const_mse
    assert report["rm_holdout_mse"] < 0.05 * const_mse


def test_report_split_sizes(trained):
    _, _, report = trained
    assert report["n_train"] + report["n_holdout"] == 1000
    assert report["n_holdout"] == 100  # 10% of 1000
    for key in ("idm_train_mse", "idm_holdout_mse", "rm_train_mse", "rm_holdout_mse"):
        assert np.isfinite(report[key])


def test_training_is_deterministic():
    spec = envs.get_spec("point-reach-open")
    ds = pair_dataset(120, 3, spec)
    cfg = completion.CompletionConfig(hidden=(8,), epochs=3, batch_size=64)
    m1, r1 = completion.train_models(ds, *envs.action_box(spec), cfg, seed=5)
    m2, r2 = completion.train_models(ds, *envs.action_box(spec), cfg, seed=5)
    for w1, w2 in zip(m1.idm.weights + m1.rm.weights, m2.idm.weights + m2.rm.weights):
        assert np.array_equal(w1, w2)
    assert r1 == r2


def test_models_roundtrip(trained, tmp_path):
    _, models, _ = trained
    completion.save_models(models, tmp_path / "m")
    loaded = completion.load_models(tmp_path / "m")
    for w1, w2 in zip(models.idm.weights + models.rm.weights, loaded.idm.weights + loaded.rm.weights):
        assert np.array_equal(w1, w2)
    traj = make_stitched(7, seed=4)
    before = completion.complete(traj, models)
    after = completion.complete(traj, loaded)
    assert before == after


def test_load_rejects_unknown_format(trained, tmp_path):
    _, models, _ = trained
    completion.save_models(models, tmp_path / "m")
    meta_path = tmp_path / "m" / "completion.meta.json"
    meta_path.write_text(meta_path.read_text().replace("completion-v1", "completion-v9"))
    with pytest.raises(ValueError, match="completion-v9"):
        completion.load_models(tmp_path / "m")
