"""Episode records, on-disk format, reward labeling, hindsight failures,
chunk transitions, and the paired off-policy / on-policy replay stores.

On disk an episode is a JSON manifest plus a sibling binary blob: magic
b"LWTR", u32 version, then little-endian float32 arrays for observations,
proprio states, and actions, with lengths taken from the manifest. A dataset
directory holds episode pairs plus an ``index.json``.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import ACTION_DIM, OBS_DIM, PROPRIO_DIM
from .errors import BufferEmpty, ContractViolation

TRAJ_MAGIC = b"LWTR"
TRAJ_VERSION = 1

SOURCES = ("demo", "offline-rollout", "online-rollout")

# Discount and chunk length used across the pipeline. The sparse terminal
# reward gamma^(T-t) makes the critic's mean value climb toward 1 as an
# episode approaches success.
DEFAULT_GAMMA = 0.99
DEFAULT_CHUNK = 8

# Suboptimal-step label codes (environment ground truth, evaluation only).
LABEL_OK = 0
LABEL_PAUSE = 1
LABEL_MISS = 2


@dataclass
class Trajectory:
    episode_id: str
    instruction: int
    observations: np.ndarray   # (T, OBS_DIM) float32
    proprio: np.ndarray        # (T, PROPRIO_DIM) float32
    actions: np.ndarray        # (T, ACTION_DIM) float32
    success: bool
    retry_keyframes: list
    source: str
    suboptimal_labels: np.ndarray | None = None  # (T,) uint8
    mirrored: bool = False

    def __post_init__(self):
        self.observations = np.ascontiguousarray(self.observations, dtype=np.float32)
        self.proprio = np.ascontiguousarray(self.proprio, dtype=np.float32)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float32)
        T = len(self.observations)
        if not (len(self.proprio) == len(self.actions) == T):
            raise ContractViolation("per-step arrays must share one length")
        if self.source not in SOURCES:
            raise ContractViolation(f"unknown source {self.source!r}")
        ks = list(self.retry_keyframes)
        if any(k2 <= k1 for k1, k2 in zip(ks, ks[1:])):
            raise ContractViolation("retry keyframes must be strictly increasing")
        if any(not (0 <= k < T) for k in ks):
            raise ContractViolation("retry keyframes must lie in [0, T)")
        self.retry_keyframes = [int(k) for k in ks]
        if self.suboptimal_labels is not None:
            self.suboptimal_labels = np.ascontiguousarray(self.suboptimal_labels,
                                                          dtype=np.uint8)
            if len(self.suboptimal_labels) != T:
                raise ContractViolation("suboptimal labels must have length T")

    @property
    def T(self) -> int:
        return len(self.observations)


# -- reward labeling -----------------------------------------------------------


def label_rewards(traj: Trajectory, gamma: float = DEFAULT_GAMMA,
                  k: int = DEFAULT_CHUNK) -> np.ndarray:
    """Sparse terminal reward: gamma^(T-t) on the last k-1 steps of a
    successful episode, zero elsewhere."""
    if not (0.0 < gamma <= 1.0):
        raise ContractViolation(f"gamma must be in (0, 1], got {gamma}")
    T = traj.T
    if not (1 <= k < T):
        raise ContractViolation(f"need 1 <= k < T, got k={k}, T={T}")
    r = np.zeros(T, dtype=np.float32)
    if traj.success:
        t = np.arange(T)
        tail = t > T - k
        r[tail] = np.power(float(gamma), (T - t[tail]).astype(np.float64))
    return r


def hindsight_failures(traj: Trajectory) -> list:
    """One synthetic failed episode per retry keyframe: the prefix up to the
    keyframe, marked unsuccessful, with no keyframes of its own."""
    if not traj.success:
        raise ContractViolation("hindsight prefixes are cut from successful episodes")
    out = []
    for i, m in enumerate(traj.retry_keyframes):
        out.append(Trajectory(
            episode_id=f"{traj.episode_id}-h{i}",
            instruction=traj.instruction,
            observations=traj.observations[:m].copy(),
            proprio=traj.proprio[:m].copy(),
            actions=traj.actions[:m].copy(),
            success=False,
            retry_keyframes=[],
            source=traj.source,
            suboptimal_labels=None if traj.suboptimal_labels is None
            else traj.suboptimal_labels[:m].copy(),
            mirrored=traj.mirrored,
        ))
    return out


def with_hindsight(trajs) -> list:
    out = list(trajs)
    for t in trajs:
        if t.success and t.retry_keyframes:
            out.extend(hindsight_failures(t))
    return out


# -- on-disk format ---------------------------------------------------------------


def write_episode(directory, traj: Trajectory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "episode_id": traj.episode_id,
        "T": traj.T,
        "instruction": traj.instruction,
        "success": traj.success,
        "retry_keyframes": traj.retry_keyframes,
        "source": traj.source,
        "mirrored": traj.mirrored,
    }
    if traj.suboptimal_labels is not None:
        manifest["suboptimal_labels"] = traj.suboptimal_labels.tolist()
    (directory / f"{traj.episode_id}.json").write_text(
        json.dumps(manifest, sort_keys=True))
    with open(directory / f"{traj.episode_id}.bin", "wb") as f:
        f.write(TRAJ_MAGIC)
        f.write(struct.pack("<I", TRAJ_VERSION))
        f.write(traj.observations.astype("<f4").tobytes())
        f.write(traj.proprio.astype("<f4").tobytes())
        f.write(traj.actions.astype("<f4").tobytes())


def read_episode(directory, episode_id: str) -> Trajectory:
    directory = Path(directory)
    manifest = json.loads((directory / f"{episode_id}.json").read_text())
    T = int(manifest["T"])
    with open(directory / f"{episode_id}.bin", "rb") as f:
        magic = f.read(4)
        if magic != TRAJ_MAGIC:
            raise ContractViolation(f"{episode_id}.bin: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != TRAJ_VERSION:
            raise ContractViolation(f"{episode_id}.bin: unsupported version {version}")
        payload = f.read()
    sizes = (T * OBS_DIM, T * PROPRIO_DIM, T * ACTION_DIM)
    if len(payload) != 4 * sum(sizes):
        raise ContractViolation(f"{episode_id}.bin: payload size mismatch")
    flat = np.frombuffer(payload, dtype="<f4")
    obs = flat[:sizes[0]].reshape(T, OBS_DIM).copy()
    prop = flat[sizes[0]:sizes[0] + sizes[1]].reshape(T, PROPRIO_DIM).copy()
    act = flat[sizes[0] + sizes[1]:].reshape(T, ACTION_DIM).copy()
    labels = manifest.get("suboptimal_labels")
    return Trajectory(
        episode_id=manifest["episode_id"], instruction=int(manifest["instruction"]),
        observations=obs, proprio=prop, actions=act,
        success=bool(manifest["success"]),
        retry_keyframes=list(manifest["retry_keyframes"]),
        source=manifest["source"],
        suboptimal_labels=None if labels is None else np.asarray(labels, dtype=np.uint8),
        mirrored=bool(manifest.get("mirrored", False)),
    )


def write_dataset(directory, trajs) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for traj in trajs:
        write_episode(directory, traj)
        ids.append(traj.episode_id)
    (directory / "index.json").write_text(json.dumps({"episodes": ids}, indent=0))


def read_dataset(directory) -> list:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    return [read_episode(directory, eid) for eid in index["episodes"]]


# -- action normalization ----------------------------------------------------------


def actions_to_net(actions: np.ndarray, max_step: float = 0.02) -> np.ndarray:
    """Map raw actions to roughly unit scale for the nets: deltas to
    [-1, 1] by the step bound, grip commands 0/1 to -1/+1."""
    a = np.asarray(actions, dtype=np.float32).copy()
    arms = a.reshape(*a.shape[:-1], 2, 3)
    arms[..., :2] /= np.float32(max_step)
    arms[..., 2] = arms[..., 2] * np.float32(2.0) - np.float32(1.0)
    return arms.reshape(a.shape)


def actions_from_net(actions: np.ndarray, max_step: float = 0.02) -> np.ndarray:
    a = np.asarray(actions, dtype=np.float32).copy()
    arms = a.reshape(*a.shape[:-1], 2, 3)
    arms[..., :2] = np.clip(arms[..., :2], -1.0, 1.0) * np.float32(max_step)
    arms[..., 2] = np.clip(arms[..., 2] * np.float32(0.5) + np.float32(0.5), 0.0, 1.0)
    return arms.reshape(a.shape)


# -- chunk transitions ---------------------------------------------------------------


class TransitionStore:
    """Sliding-window action-chunk transitions from one or more episodes,
    stored as contiguous arrays.

    One row per chunk start t in [0, T): the chunk actions[t:t+k] padded by
    repeating the final action, a validity mask, the aggregated chunk reward,
    the observation at t+k, and done <=> t+k >= T.
    """

    FIELDS = ("obs", "proprio", "chunk", "chunk_valid", "reward",
              "next_obs", "next_proprio", "next_chunk_data", "done")

    def __init__(self, arrays: dict, traj_index: np.ndarray, step_index: np.ndarray,
                 k: int, gamma: float):
        self.arrays = arrays
        self.traj_index = traj_index
        self.step_index = step_index
        self.k = k
        self.gamma = gamma

    def __len__(self):
        return len(self.traj_index)

    def __getattr__(self, name):
        if name in self.FIELDS:
            return self.arrays[name]
        raise AttributeError(name)

    def gather(self, idx) -> dict:
        return {name: arr[idx] for name, arr in self.arrays.items()}

    @classmethod
    def from_trajectories(cls, trajs, k: int = DEFAULT_CHUNK,
                          gamma: float = DEFAULT_GAMMA,
                          reward_mode: str = "sum") -> "TransitionStore":
        if reward_mode not in ("sum", "last"):
            raise ContractViolation(f"unknown reward mode {reward_mode!r}")
        rows = {name: [] for name in cls.FIELDS}
        traj_idx, step_idx = [], []
        for j, traj in enumerate(trajs):
            T = traj.T
            r = (label_rewards(traj, gamma, k) if traj.success and T > k
                 else np.zeros(T, dtype=np.float32))
            pad = np.repeat(traj.actions[-1:], 2 * k, axis=0)
            acts = np.concatenate([traj.actions, pad], axis=0)
            for t in range(T):
                chunk = acts[t:t + k]
                valid = (np.arange(t, t + k) < T)
                if reward_mode == "sum":
                    reward = float(r[t:t + k].sum(dtype=np.float64))
                else:
                    reward = float(r[min(t + k - 1, T - 1)])
                nxt = min(t + k, T - 1)
                rows["obs"].append(traj.observations[t])
                rows["proprio"].append(traj.proprio[t])
                rows["chunk"].append(chunk)
                rows["chunk_valid"].append(valid)
                rows["reward"].append(reward)
                rows["next_obs"].append(traj.observations[nxt])
                rows["next_proprio"].append(traj.proprio[nxt])
                rows["next_chunk_data"].append(acts[t + k:t + 2 * k])
                rows["done"].append(t + k >= T)
                traj_idx.append(j)
                step_idx.append(t)
        arrays = {
            "obs": np.asarray(rows["obs"], dtype=np.float32),
            "proprio": np.asarray(rows["proprio"], dtype=np.float32),
            "chunk": np.asarray(rows["chunk"], dtype=np.float32),
            "chunk_valid": np.asarray(rows["chunk_valid"], dtype=bool),
            "reward": np.asarray(rows["reward"], dtype=np.float32),
            "next_obs": np.asarray(rows["next_obs"], dtype=np.float32),
            "next_proprio": np.asarray(rows["next_proprio"], dtype=np.float32),
            "next_chunk_data": np.asarray(rows["next_chunk_data"], dtype=np.float32),
            "done": np.asarray(rows["done"], dtype=bool),
        }
        return cls(arrays, np.asarray(traj_idx), np.asarray(step_idx), k, gamma)

    def subset(self, mask: np.ndarray) -> "TransitionStore":
        idx = np.flatnonzero(mask) if mask.dtype == bool else np.asarray(mask)
        arrays = {name: arr[idx].copy() for name, arr in self.arrays.items()}
        return TransitionStore(arrays, self.traj_index[idx].copy(),
                               self.step_index[idx].copy(), self.k, self.gamma)


def critic_transitions(trajs, k: int = DEFAULT_CHUNK, gamma: float = DEFAULT_GAMMA,
                       reward_mode: str = "sum") -> TransitionStore:
    """Transitions for critic training: every episode's rows plus hindsight
    failure rows at the retry keyframes.

    Converting a truncated prefix episode pads its final chunks by repeating
    the last action, which puts the failure labels on chunk inputs the
    parent episode never contains; the value conflict the hindsight cut is
    supposed to create then never reaches the demonstrated actions. The
    failure rows here instead reuse the parent's real chunks for the k steps
    leading into each keyframe, labeled terminal with zero reward, so the
    same (state, chunk) pair carries both the failed-attempt outcome and the
    parent's recovery outcome.
    """
    store = TransitionStore.from_trajectories(trajs, k=k, gamma=gamma,
                                              reward_mode=reward_mode)
    extra = {name: [] for name in TransitionStore.FIELDS}
    extra_traj, extra_step = [], []
    for j, traj in enumerate(trajs):
        if not (traj.success and traj.retry_keyframes):
            continue
        rows = np.flatnonzero(store.traj_index == j)
        by_step = {int(store.step_index[r]): r for r in rows}
        for m in traj.retry_keyframes:
            for t in range(max(0, m - k), m):
                r = by_step[t]
                for name in TransitionStore.FIELDS:
                    extra[name].append(store.arrays[name][r])
                extra["reward"][-1] = np.float32(0.0)
                extra["done"][-1] = True
                extra_traj.append(j)
                extra_step.append(t)
    if not extra_traj:
        return store
    arrays = {}
    for name in TransitionStore.FIELDS:
        arrays[name] = np.concatenate(
            [store.arrays[name], np.asarray(extra[name],
                                            dtype=store.arrays[name].dtype)])
    return TransitionStore(
        arrays,
        np.concatenate([store.traj_index, np.asarray(extra_traj)]),
        np.concatenate([store.step_index, np.asarray(extra_step)]),
        k, gamma)


# -- replay stores -------------------------------------------------------------------


class _Fifo:
    """Capacity-bounded FIFO over transition rows (structured as dict arrays)."""

    def __init__(self, capacity: int, template: dict):
        self.capacity = capacity
        self._store = {name: np.zeros((capacity,) + arr.shape[1:], dtype=arr.dtype)
                       for name, arr in template.items()}
        self.head = 0
        self.size = 0

    def push(self, batch: dict) -> None:
        n = len(next(iter(batch.values())))
        for i in range(n):
            for name, arr in batch.items():
                self._store[name][self.head] = arr[i]
            self.head = (self.head + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng) -> dict:
        idx = rng.integers(0, self.size, shape=(n,))
        return {name: arr[idx] for name, arr in self._store.items()}


class ReplayBuffers:
    """Off-policy FIFO plus an on-policy store keyed by policy checkpoint.

    The on-policy side only keeps episodes from the two most recent
    checkpoints; when a third checkpoint appears, the oldest checkpoint's
    transitions migrate to the off-policy FIFO. Teleoperated demonstrations
    are rejected outright. push/sample are serialized by a lock so one
    collector and one trainer may run concurrently.
    """

    BUFFER_FIELDS = ("obs", "proprio", "chunk", "reward", "next_obs",
                     "next_proprio", "next_policy_chunk", "done")

    def __init__(self, off_capacity: int = 50_000):
        self.off_capacity = off_capacity
        self._off: _Fifo | None = None
        self._on: dict = {}  # checkpoint_id -> list of dict batches
        self._lock = threading.Lock()

    @staticmethod
    def _check_batch(batch: dict, source: str):
        if source == "demo":
            raise ContractViolation(
                "teleoperated demonstrations never enter the replay buffers")
        if source not in SOURCES:
            raise ContractViolation(f"unknown source {source!r}")
        missing = [f for f in ReplayBuffers.BUFFER_FIELDS if f not in batch]
        if missing:
            raise ContractViolation(f"transition batch missing fields {missing}")

    def push_offline(self, batch: dict, source: str = "offline-rollout") -> None:
        """Warm-start path: rollouts of offline checkpoints go straight to
        the off-policy FIFO."""
        self._check_batch(batch, source)
        with self._lock:
            if self._off is None:
                self._off = _Fifo(self.off_capacity, batch)
            self._off.push(batch)

    def push_online(self, batch: dict, checkpoint_id: int,
                    source: str = "online-rollout") -> None:
        self._check_batch(batch, source)
        with self._lock:
            self._on.setdefault(int(checkpoint_id), []).append(batch)
            ids = sorted(self._on)
            while len(ids) > 2:
                oldest = ids.pop(0)
                for stale in self._on.pop(oldest):
                    if self._off is None:
                        self._off = _Fifo(self.off_capacity, stale)
                    self._off.push(stale)

    def checkpoint_ids(self):
        with self._lock:
            return sorted(self._on)

    def counts(self):
        with self._lock:
            off = 0 if self._off is None else self._off.size
            on = sum(len(next(iter(b.values()))) for batches in self._on.values()
                     for b in batches)
        return off, on

    def sample(self, batch_size: int, rng) -> dict:
        """Exactly batch_size/2 transitions uniformly from each store."""
        if batch_size % 2 != 0:
            raise ContractViolation("batch size must be even for the even split")
        with self._lock:
            if self._off is None or self._off.size == 0:
                raise BufferEmpty("off-policy store empty: warm-start it with "
                                  "offline-checkpoint rollouts first")
            on_batches = [b for batches in self._on.values() for b in batches]
            if not on_batches:
                raise BufferEmpty("on-policy store empty: collect online episodes first")
            half = batch_size // 2
            off_part = self._off.sample(half, rng)
            sizes = np.array([len(next(iter(b.values()))) for b in on_batches])
            offsets = np.concatenate([[0], np.cumsum(sizes)])
            flat_idx = rng.integers(0, int(sizes.sum()), shape=(half,))
            rows = {name: [] for name in on_batches[0]}
            for fi in flat_idx:
                bi = int(np.searchsorted(offsets, fi, side="right") - 1)
                ri = int(fi - offsets[bi])
                for name in rows:
                    rows[name].append(on_batches[bi][name][ri])
            on_part = {name: np.asarray(vals) for name, vals in rows.items()}
        return {name: np.concatenate([off_part[name], on_part[name]], axis=0)
                for name in off_part}
