import numpy as np
import pytest

from lacework.env import ACTION_DIM, OBS_DIM, PROPRIO_DIM
from lacework.errors import BufferEmpty, ContractViolation
from lacework.numcore import SeededRng
from lacework.trajectory import (
    ReplayBuffers,
    Trajectory,
    TransitionStore,
    actions_from_net,
    actions_to_net,
    hindsight_failures,
    label_rewards,
    read_dataset,
    read_episode,
    with_hindsight,
    write_dataset,
    write_episode,
)

# chi-square critical value at p = 0.01 for 49 degrees of freedom; the
# uniformity test keeps the statistic below it (i.e. p > 0.01)
CHI2_99_DF49 = 74.919


def make_traj(T=100, success=True, keyframes=(), seed=0, source="demo"):
    rng = SeededRng(seed)
    return Trajectory(
        episode_id=f"t{seed}", instruction=0,
        observations=rng.random_f32_grid((T, OBS_DIM)),
        proprio=rng.random_f32_grid((T, PROPRIO_DIM)),
        actions=rng.normal((T, ACTION_DIM), scale=0.01),
        success=success, retry_keyframes=list(keyframes), source=source)


# -- rewards ------------------------------------------------------------------


def test_reward_closed_form_tail_value():
    traj = make_traj(T=100, success=True)
    r = label_rewards(traj, gamma=0.99, k=10)
    assert r[95] == pytest.approx(0.99 ** 5, abs=1e-6)


def test_reward_zero_before_tail_and_on_failures():
    traj = make_traj(T=100, success=True)
    r = label_rewards(traj, gamma=0.99, k=10)
    assert r[50] == 0.0
    assert np.all(r[: 100 - 10 + 1] == 0.0)
    failed = make_traj(T=100, success=False)
    assert np.all(label_rewards(failed, 0.99, 10) == 0.0)


def test_reward_tail_strictly_increasing():
    traj = make_traj(T=60, success=True)
    r = label_rewards(traj, gamma=0.99, k=8)
    tail = r[60 - 8 + 1:]
    assert len(tail) == 7
    assert np.all(np.diff(tail) > 0)


def test_reward_contract_violations():
    traj = make_traj(T=10)
    with pytest.raises(ContractViolation):
        label_rewards(traj, gamma=0.99, k=10)  # k >= T
    with pytest.raises(ContractViolation):
        label_rewards(traj, gamma=0.0, k=2)


# -- hindsight failures -----------------------------------------------------------


def test_hindsight_prefix_lengths():
    traj = make_traj(T=100, success=True, keyframes=(30, 60))
    prefixes = hindsight_failures(traj)
    assert [p.T for p in prefixes] == [30, 60]
    for p in prefixes:
        assert not p.success
        assert p.retry_keyframes == []
    assert traj.T == 100  # original untouched


def test_hindsight_empty_without_keyframes():
    assert hindsight_failures(make_traj(T=50, success=True)) == []


def test_hindsight_requires_success():
    with pytest.raises(ContractViolation):
        hindsight_failures(make_traj(T=50, success=False, keyframes=(10,)))


def test_hindsight_count_oracle_dataset():
    trajs = [make_traj(T=40 + i, success=True,
                       keyframes=tuple(range(10, 10 + (i % 3) * 5, 5)), seed=i)
             for i in range(50)]
    total_keyframes = sum(len(t.retry_keyframes) for t in trajs)
    augmented = with_hindsight(trajs)
    assert len(augmented) == 50 + total_keyframes


# -- on-disk format ------------------------------------------------------------------


def test_episode_roundtrip_bitwise(tmp_path):
    traj = make_traj(T=37, success=True, keyframes=(5, 12))
    traj.suboptimal_labels = np.asarray([i % 3 for i in range(37)], dtype=np.uint8)
    write_episode(tmp_path, traj)
    back = read_episode(tmp_path, traj.episode_id)
    assert np.array_equal(back.observations, traj.observations)
    assert np.array_equal(back.proprio, traj.proprio)
    assert np.array_equal(back.actions, traj.actions)
    assert np.array_equal(back.suboptimal_labels, traj.suboptimal_labels)
    assert back.retry_keyframes == traj.retry_keyframes
    assert back.success == traj.success
    assert back.source == traj.source


def test_dataset_roundtrip(tmp_path):
    trajs = [make_traj(T=20 + i, seed=i) for i in range(5)]
    write_dataset(tmp_path / "ds", trajs)
    back = read_dataset(tmp_path / "ds")
    assert [t.episode_id for t in back] == [t.episode_id for t in trajs]
    for a, b in zip(back, trajs):
        assert np.array_equal(a.observations, b.observations)


def test_trajectory_validation():
    with pytest.raises(ContractViolation):
        make_traj(T=10, keyframes=(5, 5))
    with pytest.raises(ContractViolation):
        make_traj(T=10, keyframes=(11,))
    with pytest.raises(ContractViolation):
        make_traj(T=10, source="human")


# -- transitions ----------------------------------------------------------------------


def test_transition_chunking_and_padding():
    traj = make_traj(T=12, success=True)
    store = TransitionStore.from_trajectories([traj], k=8, gamma=0.99)
    assert len(store) == 12
    assert store.chunk.shape == (12, 8, ACTION_DIM)
    # chunk at t=10 has 2 real actions then repeats of the last action
    np.testing.assert_array_equal(store.chunk[10, :2], traj.actions[10:12])
    np.testing.assert_array_equal(store.chunk[10, 2:],
                                  np.repeat(traj.actions[-1:], 6, axis=0))
    assert store.chunk_valid[10].tolist() == [True, True] + [False] * 6
    assert store.done.tolist() == [t + 8 >= 12 for t in range(12)]


def test_transition_rewards_sum_mode():
    traj = make_traj(T=20, success=True)
    r = label_rewards(traj, 0.99, 4)
    store = TransitionStore.from_trajectories([traj], k=4, gamma=0.99)
    expected = [float(r[t:t + 4].sum(dtype=np.float64)) for t in range(20)]
    np.testing.assert_allclose(store.reward, expected, atol=1e-6)


def test_action_normalization_roundtrip():
    rng = SeededRng(5)
    a = rng.normal((10, 8, ACTION_DIM), scale=0.015)
    a[..., [2, 5]] = (a[..., [2, 5]] > 0).astype(np.float32)
    a[..., [0, 1, 3, 4]] = np.clip(a[..., [0, 1, 3, 4]], -0.02, 0.02)
    back = actions_from_net(actions_to_net(a))
    np.testing.assert_allclose(back, a, atol=1e-6)


# -- replay buffers ---------------------------------------------------------------------


def fake_batch(n, seed=0):
    rng = SeededRng(seed)
    return {
        "obs": rng.normal((n, OBS_DIM)),
        "proprio": rng.normal((n, PROPRIO_DIM)),
        "chunk": rng.normal((n, 8, ACTION_DIM)),
        "reward": rng.normal((n,)),
        "next_obs": rng.normal((n, OBS_DIM)),
        "next_proprio": rng.normal((n, PROPRIO_DIM)),
        "next_policy_chunk": rng.normal((n, 8, ACTION_DIM)),
        "done": np.zeros(n, dtype=bool),
    }


def test_buffers_two_checkpoint_retention():
    buf = ReplayBuffers(off_capacity=1000)
    buf.push_offline(fake_batch(4, seed=1))
    buf.push_online(fake_batch(3, seed=2), checkpoint_id=1)
    buf.push_online(fake_batch(3, seed=3), checkpoint_id=1)
    buf.push_online(fake_batch(3, seed=4), checkpoint_id=2)
    buf.push_online(fake_batch(3, seed=5), checkpoint_id=2)
    assert buf.checkpoint_ids() == [1, 2]
    off_before, on_before = buf.counts()
    buf.push_online(fake_batch(3, seed=6), checkpoint_id=3)
    assert buf.checkpoint_ids() == [2, 3]
    off_after, on_after = buf.counts()
    assert off_after == off_before + 6   # checkpoint-1 rows migrated
    assert on_after == on_before - 6 + 3


def test_buffers_retention_invariant_random_pushes():
    buf = ReplayBuffers(off_capacity=5000)
    rng = SeededRng(9)
    ckpt = 0
    for i in range(60):
        if rng.bernoulli(0.3):
            ckpt += 1
        buf.push_online(fake_batch(2, seed=100 + i), checkpoint_id=ckpt)
        assert len(buf.checkpoint_ids()) <= 2


def test_buffers_reject_demonstrations():
    buf = ReplayBuffers()
    with pytest.raises(ContractViolation):
        buf.push_offline(fake_batch(2), source="demo")
    with pytest.raises(ContractViolation):
        buf.push_online(fake_batch(2), checkpoint_id=0, source="demo")


def test_buffers_empty_store_error_mentions_warm_start():
    buf = ReplayBuffers()
    buf.push_online(fake_batch(2), checkpoint_id=0)
    with pytest.raises(BufferEmpty, match="warm-start"):
        buf.sample(4, SeededRng(0))


def test_sample_even_split_and_singletons():
    buf = ReplayBuffers(off_capacity=10)
    off = fake_batch(1, seed=1)
    on = fake_batch(1, seed=2)
    buf.push_offline(off)
    buf.push_online(on, checkpoint_id=0)
    batch = buf.sample(2, SeededRng(3))
    assert len(batch["obs"]) == 2
    np.testing.assert_array_equal(batch["obs"][0], off["obs"][0])
    np.testing.assert_array_equal(batch["obs"][1], on["obs"][0])
    with pytest.raises(ContractViolation):
        buf.sample(3, SeededRng(3))


def test_sample_split_counts_exact():
    buf = ReplayBuffers(off_capacity=500)
    buf.push_offline(fake_batch(100, seed=1))
    buf.push_online(fake_batch(50, seed=2), checkpoint_id=0)
    rng = SeededRng(4)
    batch = buf.sample(256, rng)
    # first half comes from the off-policy store by construction
    off_rows = {tuple(np.round(row[:4], 6)) for row in fake_batch(100, seed=1)["obs"]}
    for row in batch["obs"][:128]:
        assert tuple(np.round(row[:4], 6)) in off_rows


def test_sample_uniformity_chi_square():
    n_items = 50
    buf = ReplayBuffers(off_capacity=n_items)
    batch = fake_batch(n_items, seed=7)
    batch["reward"] = np.arange(n_items, dtype=np.float32)  # identifying key
    buf.push_offline(batch)
    buf.push_online(fake_batch(4, seed=8), checkpoint_id=0)
    rng = SeededRng(11)
    counts = np.zeros(n_items)
    draws = 100_000
    got = buf.sample(2 * draws // 100, rng)  # warm-up shape check
    total = 0
    while total < draws:
        sample = buf.sample(200, rng)
        keys = sample["reward"][:100].astype(int)  # off-policy half
        np.add.at(counts, keys, 1)
        total += 100
    expected = total / n_items
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_99_DF49
