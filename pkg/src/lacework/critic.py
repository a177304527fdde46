"""Distributional chunk critics and the progress signal.

The main critic maps (observation, proprio, action chunk) to one categorical
distribution over [0, 1] per chunk position, trained by temporal difference
with twin heads, frozen Polyak targets, and the categorical projection of
the bootstrapped return. The mean of the first position's distribution,
averaged over twins, is the task-progress signal used for demo filtering.

Two baselines share the data and schedule for head-to-head comparisons: a
scalar twin critic with squared-error TD (unbounded outputs), and a
regressor of normalized episode time trained on successful episodes only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .env import ACTION_DIM, OBS_DIM, PROPRIO_DIM
from .errors import ContractViolation, TrainingDivergence
from .flowpolicy import FEATURE_DIM, FlowPolicy, build_features
from .numcore import Mlp, SeededRng
from .numcore import autodiff as ad
from .trajectory import DEFAULT_CHUNK, DEFAULT_GAMMA, TransitionStore, actions_to_net

N_ATOMS = 51


def atom_grid(n_atoms: int = N_ATOMS) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_atoms, dtype=np.float32)


def distribution_mean(probs: np.ndarray, atoms: np.ndarray) -> np.ndarray:
    return probs @ atoms.astype(probs.dtype)


def project_categorical(reward, gamma, source_probs: np.ndarray,
                        atoms: np.ndarray) -> np.ndarray:
    """Map each source atom to clamp(reward + gamma * atom, 0, 1) and split
    its mass linearly between the neighboring atoms.

    `reward` and `gamma` may be scalars or per-row arrays; rows of the
    result sum to 1 (float64 accumulation).
    """
    probs = np.atleast_2d(np.asarray(source_probs, dtype=np.float64))
    B, n = probs.shape
    reward = np.broadcast_to(np.asarray(reward, dtype=np.float64), (B,))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (B,))
    z = np.clip(reward[:, None] + gamma[:, None] * atoms.astype(np.float64)[None, :],
                0.0, 1.0)
    delta = 1.0 / (n - 1)
    b = z / delta
    lo = np.floor(b).astype(np.int64)
    lo = np.clip(lo, 0, n - 1)
    w_hi = b - lo
    hi = np.clip(lo + 1, 0, n - 1)
    row_base = (np.arange(B, dtype=np.int64) * n)[:, None]
    flat_lo = (row_base + lo).ravel()
    flat_hi = (row_base + hi).ravel()
    out = np.bincount(flat_lo, weights=(probs * (1.0 - w_hi)).ravel(),
                      minlength=B * n)
    out += np.bincount(flat_hi, weights=(probs * w_hi).ravel(), minlength=B * n)
    result = out.reshape(B, n).astype(np.float32)
    return result[0] if np.asarray(source_probs).ndim == 1 else result


@dataclass
class CriticConfig:
    n_atoms: int = N_ATOMS
    chunk: int = DEFAULT_CHUNK
    gamma: float = DEFAULT_GAMMA
    hidden: tuple = (256, 256)
    lr: float = 3e-4
    batch_size: int = 256
    steps: int = 20_000
    polyak_tau: float = 0.005
    smooth_sigma: float = 0.1
    smooth_clip: float = 0.2
    td_target: str = "policy"   # "policy" bootstraps the BC flow policy's
    # canonical next chunk; "in_sample" uses the dataset's own next chunk
    max_gripper_step: float = 0.02

    @property
    def gamma_chunk(self) -> float:
        """Per-chunk-hop discount so values track gamma^(steps remaining)."""
        return float(self.gamma) ** self.chunk


def _critic_in_dim(cfg: CriticConfig) -> int:
    return FEATURE_DIM + cfg.chunk * ACTION_DIM


class DistributionalCritic:
    """Twin categorical chunk critic with frozen Polyak-averaged targets."""

    def __init__(self, cfg: CriticConfig, rng: SeededRng | None = None,
                 nets: list | None = None):
        self.cfg = cfg
        self.atoms = atom_grid(cfg.n_atoms)
        out_dim = cfg.chunk * cfg.n_atoms
        widths = [_critic_in_dim(cfg), *cfg.hidden, out_dim]
        if nets is None:
            nets = [Mlp(widths, rng.split("qa")), Mlp(widths, rng.split("qb"))]
        self.nets = nets
        self.targets = [Mlp(n.widths, params=n.params) for n in self.nets]

    # -- evaluation ---------------------------------------------------------

    def _inputs(self, obs, proprio, chunk_raw) -> np.ndarray:
        feats = build_features(obs, proprio)
        chunk_net = actions_to_net(chunk_raw, self.cfg.max_gripper_step)
        chunk_net = chunk_net.reshape(len(feats), -1)
        return np.concatenate([feats, chunk_net], axis=-1)

    def _probs(self, net: Mlp, inputs: np.ndarray) -> np.ndarray:
        logits = net.forward(inputs).reshape(len(inputs), self.cfg.chunk,
                                             self.cfg.n_atoms)
        logits = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)

    def progress(self, obs, proprio, chunk_raw) -> np.ndarray:
        """Mean of the first chunk position's distribution, twin-averaged."""
        squeeze = np.asarray(obs).ndim == 1
        inputs = self._inputs(np.atleast_2d(obs), np.atleast_2d(proprio),
                              np.asarray(chunk_raw).reshape(-1, self.cfg.chunk,
                                                            ACTION_DIM))
        means = [distribution_mean(self._probs(net, inputs)[:, 0, :], self.atoms)
                 for net in self.nets]
        rho = 0.5 * (means[0] + means[1])
        return float(rho[0]) if squeeze else rho

    # -- training ------------------------------------------------------------

    def td_targets(self, batch: dict, rng: SeededRng) -> np.ndarray:
        """Projected per-position target distributions, (B, k, n_atoms)."""
        cfg = self.cfg
        B = len(batch["obs"])
        next_chunk_net = actions_to_net(batch["next_policy_chunk"],
                                        cfg.max_gripper_step).reshape(B, -1)
        noise = np.clip(rng.normal((B, next_chunk_net.shape[1]), scale=cfg.smooth_sigma),
                        -cfg.smooth_clip, cfg.smooth_clip)
        smoothed = np.clip(next_chunk_net + noise, -1.0, 1.0)
        next_feats = build_features(batch["next_obs"], batch["next_proprio"])
        target_in = np.concatenate([next_feats, smoothed], axis=-1)
        pa = self._probs(self.targets[0], target_in)
        pb = self._probs(self.targets[1], target_in)
        mean_a = distribution_mean(pa[:, 0, :], self.atoms)
        mean_b = distribution_mean(pb[:, 0, :], self.atoms)
        src = np.where((mean_a <= mean_b)[:, None, None], pa, pb)
        gamma_eff = np.where(batch["done"], 0.0, cfg.gamma_chunk)
        flat_src = src.reshape(B * cfg.chunk, cfg.n_atoms)
        flat_r = np.repeat(batch["reward"], cfg.chunk)
        flat_g = np.repeat(gamma_eff, cfg.chunk)
        proj = project_categorical(flat_r, flat_g, flat_src, self.atoms)
        return proj.reshape(B, cfg.chunk, cfg.n_atoms)

    def td_update(self, batch: dict, rng: SeededRng) -> float:
        """One optimizer step on both twins; Polyak-update the targets."""
        cfg = self.cfg
        target_probs = self.td_targets(batch, rng)
        inputs = self._inputs(batch["obs"], batch["proprio"], batch["chunk"])
        B = len(inputs)
        tgt = ad.leaf(target_probs.reshape(B * cfg.chunk, cfg.n_atoms))
        inp = ad.leaf(inputs)
        losses, leaves = [], []
        for net in self.nets:
            params = net.param_leaf()
            logits = ad.reshape(net.forward_graph(inp, params),
                                (B * cfg.chunk, cfg.n_atoms))
            losses.append(ad.cross_entropy(logits, tgt))
            leaves.append(params)
        loss = ad.scale(ad.add(losses[0], losses[1]), 0.5)
        if not np.isfinite(loss.value):
            raise TrainingDivergence("critic td_update", "loss non-finite")
        grads = ad.grad(loss, leaves)
        for net, g in zip(self.nets, grads):
            net.adam_step(g, cfg.lr, where="critic td_update")
        for target, net in zip(self.targets, self.nets):
            target.polyak_from(net, cfg.polyak_tau)
        return float(loss.value)

    # -- persistence ------------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = ("qa", "qb", "target_a", "target_b")
        for name, net in zip(names, self.nets + self.targets):
            net.save(directory / f"{name}.lwnc")
        meta = asdict(self.cfg)
        meta["hidden"] = list(self.cfg.hidden)
        (directory / "critic.json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "DistributionalCritic":
        directory = Path(directory)
        meta = json.loads((directory / "critic.json").read_text())
        meta["hidden"] = tuple(meta["hidden"])
        cfg = CriticConfig(**meta)
        nets = [Mlp.load(directory / "qa.lwnc"), Mlp.load(directory / "qb.lwnc")]
        critic = cls(cfg, nets=nets)
        critic.targets = [Mlp.load(directory / "target_a.lwnc"),
                          Mlp.load(directory / "target_b.lwnc")]
        return critic


class ScalarCritic:
    """Twin chunk critic regressing raw values; no bounded support."""

    def __init__(self, cfg: CriticConfig, rng: SeededRng):
        self.cfg = cfg
        widths = [_critic_in_dim(cfg), *cfg.hidden, cfg.chunk]
        self.nets = [Mlp(widths, rng.split("sa")), Mlp(widths, rng.split("sb"))]
        self.targets = [Mlp(n.widths, params=n.params) for n in self.nets]

    def _inputs(self, obs, proprio, chunk_raw) -> np.ndarray:
        feats = build_features(obs, proprio)
        chunk_net = actions_to_net(chunk_raw, self.cfg.max_gripper_step)
        return np.concatenate([feats, chunk_net.reshape(len(feats), -1)], axis=-1)

    def progress(self, obs, proprio, chunk_raw) -> np.ndarray:
        squeeze = np.asarray(obs).ndim == 1
        inputs = self._inputs(np.atleast_2d(obs), np.atleast_2d(proprio),
                              np.asarray(chunk_raw).reshape(-1, self.cfg.chunk,
                                                            ACTION_DIM))
        vals = 0.5 * (self.nets[0].forward(inputs)[:, 0]
                      + self.nets[1].forward(inputs)[:, 0])
        return float(vals[0]) if squeeze else vals

    def td_update(self, batch: dict, rng: SeededRng) -> float:
        cfg = self.cfg
        B = len(batch["obs"])
        next_chunk_net = actions_to_net(batch["next_policy_chunk"],
                                        cfg.max_gripper_step).reshape(B, -1)
        noise = np.clip(rng.normal((B, next_chunk_net.shape[1]), scale=cfg.smooth_sigma),
                        -cfg.smooth_clip, cfg.smooth_clip)
        smoothed = np.clip(next_chunk_net + noise, -1.0, 1.0)
        next_feats = build_features(batch["next_obs"], batch["next_proprio"])
        target_in = np.concatenate([next_feats, smoothed], axis=-1)
        q_next = np.minimum(self.targets[0].forward(target_in),
                            self.targets[1].forward(target_in))
        gamma_eff = np.where(batch["done"], 0.0, cfg.gamma_chunk)[:, None]
        target = (batch["reward"][:, None] + gamma_eff * q_next).astype(np.float32)
        inputs = self._inputs(batch["obs"], batch["proprio"], batch["chunk"])
        inp, tgt = ad.leaf(inputs), ad.leaf(target)
        losses, leaves = [], []
        for net in self.nets:
            params = net.param_leaf()
            losses.append(ad.mse(net.forward_graph(inp, params), tgt))
            leaves.append(params)
        loss = ad.scale(ad.add(losses[0], losses[1]), 0.5)
        if not np.isfinite(loss.value):
            raise TrainingDivergence("scalar critic td_update", "loss non-finite")
        grads = ad.grad(loss, leaves)
        for net, g in zip(self.nets, grads):
            net.adam_step(g, cfg.lr, where="scalar critic td_update")
        for target_net, net in zip(self.targets, self.nets):
            target_net.polyak_from(net, cfg.polyak_tau)
        return float(loss.value)


# -- bootstrap chunks --------------------------------------------------------------


def policy_next_chunks(policy: FlowPolicy, store: TransitionStore,
                       batch: int = 1024) -> np.ndarray:
    """Canonical (zero-noise) policy chunks at every next state; the TD
    bootstrap adds fresh smoothing noise per update on top of these."""
    out = np.empty_like(store.chunk)
    zeros = np.zeros((batch, policy.chunk_dim), dtype=np.float32)
    for lo in range(0, len(store), batch):
        hi = min(lo + batch, len(store))
        out[lo:hi] = policy.sample_chunk_batch(
            store.next_obs[lo:hi], store.next_proprio[lo:hi],
            eps=zeros[:hi - lo])
    return out


def attach_bootstrap_chunks(store: TransitionStore, policy: FlowPolicy | None,
                            td_target: str) -> None:
    if td_target == "in_sample":
        store.arrays["next_policy_chunk"] = store.next_chunk_data
    elif td_target == "policy":
        if policy is None:
            raise ContractViolation("policy bootstrap requires a trained policy")
        store.arrays["next_policy_chunk"] = policy_next_chunks(policy, store)
    else:
        raise ContractViolation(f"unknown td_target {td_target!r}")


# -- training loops ------------------------------------------------------------------


def train_distributional_critic(store: TransitionStore, policy: FlowPolicy | None,
                                cfg: CriticConfig, rng: SeededRng,
                                log_every: int = 0) -> tuple:
    attach_bootstrap_chunks(store, policy, cfg.td_target)
    critic = DistributionalCritic(cfg, rng.split("init"))
    data_rng = rng.split("data")
    noise_rng = rng.split("noise")
    history = []
    for step in range(cfg.steps):
        idx = data_rng.integers(0, len(store), shape=(cfg.batch_size,))
        history.append(critic.td_update(store.gather(idx), noise_rng))
        if log_every and (step + 1) % log_every == 0:
            print(f"  critic step {step + 1}/{cfg.steps} "
                  f"ce {np.mean(history[-log_every:]):.4f}", flush=True)
    return critic, history


def train_scalar_critic(store: TransitionStore, policy: FlowPolicy | None,
                        cfg: CriticConfig, rng: SeededRng,
                        log_every: int = 0) -> tuple:
    attach_bootstrap_chunks(store, policy, cfg.td_target)
    critic = ScalarCritic(cfg, rng.split("init"))
    data_rng = rng.split("data")
    noise_rng = rng.split("noise")
    history = []
    for step in range(cfg.steps):
        idx = data_rng.integers(0, len(store), shape=(cfg.batch_size,))
        history.append(critic.td_update(store.gather(idx), noise_rng))
        if log_every and (step + 1) % log_every == 0:
            print(f"  scalar step {step + 1}/{cfg.steps} "
                  f"mse {np.mean(history[-log_every:]):.5f}", flush=True)
    return critic, history


# -- temporal-progress regression baseline ----------------------------------------------


def temporal_targets(T: int) -> np.ndarray:
    """Normalized episode time t/T for t in [0, T)."""
    return (np.arange(T, dtype=np.float64) / T).astype(np.float32)


class ProgressRegressor:
    """Regresses normalized episode time from state features alone."""

    def __init__(self, cfg: CriticConfig, rng: SeededRng):
        self.cfg = cfg
        self.net = Mlp([FEATURE_DIM, *cfg.hidden, 1], rng.split("reg"))

    def progress(self, obs, proprio, chunk_raw=None) -> np.ndarray:
        squeeze = np.asarray(obs).ndim == 1
        feats = build_features(np.atleast_2d(obs), np.atleast_2d(proprio))
        vals = self.net.forward(feats)[:, 0]
        return float(vals[0]) if squeeze else vals


def train_progress_regressor(trajs, cfg: CriticConfig, rng: SeededRng,
                             log_every: int = 0) -> tuple:
    """Fit t/T on every state of the successful trajectories."""
    succ = [t for t in trajs if t.success]
    if not succ:
        raise ContractViolation("regression baseline needs successful episodes")
    feats = np.concatenate([build_features(t.observations, t.proprio) for t in succ])
    targets = np.concatenate([temporal_targets(t.T) for t in succ])[:, None]
    model = ProgressRegressor(cfg, rng.split("init"))
    data_rng = rng.split("data")
    history = []
    for step in range(cfg.steps):
        idx = data_rng.integers(0, len(feats), shape=(cfg.batch_size,))
        params = model.net.param_leaf()
        loss = ad.mse(model.net.forward_graph(ad.leaf(feats[idx]), params),
                      ad.leaf(targets[idx]))
        (g,) = ad.grad(loss, [params])
        if not np.isfinite(loss.value):
            raise TrainingDivergence("progress regression", f"step {step}")
        model.net.adam_step(g, cfg.lr, where="progress regression")
        history.append(float(loss.value))
        if log_every and (step + 1) % log_every == 0:
            print(f"  regression step {step + 1}/{cfg.steps} "
                  f"mse {np.mean(history[-log_every:]):.5f}", flush=True)
    return model, history
