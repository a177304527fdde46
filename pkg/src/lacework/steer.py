"""Online steering of a frozen flow policy through its initial noise.

A Gaussian noise predictor proposes the flow's starting noise per replan;
it is trained to maximize a distilled critic defined directly on noise
space (so no gradients ever cross the flow integration), with a hinge
penalty that keeps the proposed noise close to the unit Gaussian the flow
was trained with. The noise critic is distilled from the action-space
critic, which itself keeps training on online transitions. Rollouts run
through the same deployment post-processing as evaluation, so the policy
improves against exactly the actions that get executed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .critic import DistributionalCritic, atom_grid, distribution_mean
from .env import ACTION_DIM, EnvConfig, LaceEnv
from .errors import ContractViolation, TrainingDivergence
from .flowpolicy import (
    FEATURE_DIM,
    DeployConfig,
    FlowPolicy,
    build_features,
    rollout_episode,
)
from .numcore import Mlp, SeededRng
from .numcore import autodiff as ad
from .trajectory import ReplayBuffers, TransitionStore

LOG_SIGMA_MIN = -5.0
LOG_SIGMA_MAX = 2.0


@dataclass
class SteerConfig:
    penalty_weight: float = 1.0          # c in the hinge term
    noise_budget: float | None = None    # beta; default 1.5 * dim/2
    warm_start_episodes: int = 200
    episodes_per_round: int = 12
    steps_per_round: int = 50
    rounds: int = 50
    ma_window: int = 24
    batch_size: int = 256
    lr: float = 3e-4
    hidden: tuple = (256, 256)
    mix_normal_prob: float = 0.5
    off_capacity: int = 50_000

    def budget(self, dim: int) -> float:
        return 1.5 * (dim / 2.0) if self.noise_budget is None else self.noise_budget


def noise_penalty(eps: np.ndarray, beta: float, c: float):
    """c * max(0.5 * ||eps||^2 - beta, 0), rowwise for batches."""
    if beta <= 0 or c < 0:
        raise ContractViolation("need beta > 0 and c >= 0")
    eps = np.asarray(eps, dtype=np.float64)
    half_sq = 0.5 * (eps * eps).sum(axis=-1)
    return c * np.maximum(half_sq - beta, 0.0)


class NoisePredictor:
    """Gaussian head over the flow's initial noise.

    The final layer starts at zero, so the initial proposal is exactly the
    unit Gaussian the flow policy was trained with.
    """

    def __init__(self, chunk_dim: int, cfg: SteerConfig, rng: SeededRng | None = None,
                 net: Mlp | None = None):
        self.chunk_dim = chunk_dim
        self.cfg = cfg
        widths = [FEATURE_DIM, *cfg.hidden, 2 * chunk_dim]
        self.net = net if net is not None else Mlp(widths, rng.split("predictor"),
                                                   zero_last_layer=True)

    def mean_logsigma(self, feats: np.ndarray) -> tuple:
        out = self.net.forward(np.atleast_2d(feats))
        mu = out[:, :self.chunk_dim]
        log_sigma = np.clip(out[:, self.chunk_dim:], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mu, log_sigma

    def sample(self, feats: np.ndarray, rng: SeededRng) -> np.ndarray:
        mu, log_sigma = self.mean_logsigma(feats)
        z = rng.normal(mu.shape)
        eps = mu + np.exp(log_sigma) * z
        return eps[0] if np.asarray(feats).ndim == 1 else eps

    def eps_source(self, rng_unused=None):
        """Adapter for rollout_episode's eps_source hook."""
        def draw(feats, rng):
            return self.sample(feats, rng)
        return draw

    def save(self, path) -> None:
        self.net.save(path)


class NoiseCritic:
    """Twin categorical critics on (features, noise)."""

    def __init__(self, chunk_dim: int, n_atoms: int, cfg: SteerConfig,
                 rng: SeededRng | None = None, nets: list | None = None):
        self.chunk_dim = chunk_dim
        self.n_atoms = n_atoms
        self.atoms = atom_grid(n_atoms)
        widths = [FEATURE_DIM + chunk_dim, *cfg.hidden, n_atoms]
        if nets is None:
            nets = [Mlp(widths, rng.split("na")), Mlp(widths, rng.split("nb"))]
        self.nets = nets

    def probs(self, net: Mlp, feats: np.ndarray, eps: np.ndarray) -> np.ndarray:
        logits = net.forward(np.concatenate([feats, eps], axis=-1))
        logits = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)

    def mean_value(self, feats: np.ndarray, eps: np.ndarray) -> np.ndarray:
        feats = np.atleast_2d(feats)
        eps = np.atleast_2d(eps)
        vals = [distribution_mean(self.probs(net, feats, eps), self.atoms)
                for net in self.nets]
        return 0.5 * (vals[0] + vals[1])


# -- training objectives ----------------------------------------------------------


def actor_update(predictor: NoisePredictor, noise_critic: NoiseCritic,
                 feats: np.ndarray, cfg: SteerConfig, rng: SeededRng,
                 apply_step: bool = True) -> dict:
    """Reparameterized step on the predictor: maximize the noise critic's
    mean value minus the divergence penalty. Critic parameters receive no
    update from this loss."""
    B = len(feats)
    dim = predictor.chunk_dim
    beta = cfg.budget(dim)
    z = rng.normal((B, dim))
    params = predictor.net.param_leaf()
    out = predictor.net.forward_graph(ad.leaf(feats), params)
    mu = ad.slice_last(out, 0, dim)
    log_sigma = ad.clip(ad.slice_last(out, dim, 2 * dim),
                        LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    eps = ad.add(mu, ad.mul(ad.exp(log_sigma), ad.leaf(z)))
    critic_in = ad.concat([ad.leaf(feats), eps], axis=-1)
    values = []
    for net in noise_critic.nets:
        logits = net.forward_graph(critic_in, ad.leaf(net.params))
        probs = ad.softmax(logits)
        values.append(ad.matmul(probs, ad.leaf(noise_critic.atoms[:, None])))
    value_mean = ad.mean_all(ad.scale(ad.add(values[0], values[1]), 0.5))
    half_sq = ad.scale(ad.sum_last(ad.square(eps)), 0.5)
    hinge = ad.relu(ad.shift(half_sq, -beta))
    penalty = ad.scale(ad.mean_all(hinge), cfg.penalty_weight)
    loss = ad.add(ad.neg(value_mean), penalty)
    if not np.isfinite(loss.value):
        raise TrainingDivergence("steer actor_update", "loss non-finite")
    (g,) = ad.grad(loss, [params])
    if apply_step:
        predictor.net.adam_step(g, cfg.lr, where="steer actor_update")
    return {
        "loss": float(loss.value),
        "value_mean": float(value_mean.value),
        "penalty_mean": float(penalty.value),
        "eps_half_sq_mean": float(np.mean(0.5 * (eps.value ** 2).sum(axis=-1))),
        "grad": g,
    }


def mixture_noise(predictor: NoisePredictor, feats: np.ndarray,
                  cfg: SteerConfig, rng: SeededRng) -> tuple:
    """Distillation inputs: unit Gaussian with probability mix_normal_prob,
    otherwise the predictor's proposal. Returns (eps, from_normal mask)."""
    B = len(feats)
    dim = predictor.chunk_dim
    from_normal = np.asarray([rng.bernoulli(cfg.mix_normal_prob) for _ in range(B)])
    gauss = rng.normal((B, dim))
    proposed = predictor.sample(feats, rng)
    eps = np.where(from_normal[:, None], gauss, proposed).astype(np.float32)
    return eps, from_normal


def distill_noise_critic(noise_critic: NoiseCritic, action_critic: DistributionalCritic,
                         policy: FlowPolicy, predictor: NoisePredictor,
                         batch: dict, cfg: SteerConfig, rng: SeededRng) -> float:
    """Cross-entropy distillation of the action critic through the frozen
    flow: evaluate the chunk each noise integrates to, and make the noise
    critic predict that distribution at the noise itself."""
    feats = build_features(batch["obs"], batch["proprio"])
    eps, _ = mixture_noise(predictor, feats, cfg, rng)
    chunks = policy.sample_chunk_batch(batch["obs"], batch["proprio"], eps=eps)
    inputs = action_critic._inputs(batch["obs"], batch["proprio"], chunks)
    pa = action_critic._probs(action_critic.nets[0], inputs)[:, 0, :]
    pb = action_critic._probs(action_critic.nets[1], inputs)[:, 0, :]
    target = 0.5 * (pa + pb)
    inp = ad.leaf(np.concatenate([feats, eps], axis=-1))
    tgt = ad.leaf(target.astype(np.float32))
    losses, leaves = [], []
    for net in noise_critic.nets:
        params = net.param_leaf()
        losses.append(ad.cross_entropy(net.forward_graph(inp, params), tgt))
        leaves.append(params)
    loss = ad.scale(ad.add(losses[0], losses[1]), 0.5)
    if not np.isfinite(loss.value):
        raise TrainingDivergence("distill_noise_critic", "loss non-finite")
    grads = ad.grad(loss, leaves)
    for net, g in zip(noise_critic.nets, grads):
        net.adam_step(g, cfg.lr, where="distill_noise_critic")
    return float(loss.value)


# -- online loop -----------------------------------------------------------------------


def _traj_to_buffer_batch(traj, policy: FlowPolicy, critic_cfg) -> dict:
    store = TransitionStore.from_trajectories([traj], k=critic_cfg.chunk,
                                              gamma=critic_cfg.gamma)
    zeros = np.zeros((len(store), policy.chunk_dim), dtype=np.float32)
    next_chunks = policy.sample_chunk_batch(store.next_obs, store.next_proprio,
                                            eps=zeros)
    return {
        "obs": store.obs, "proprio": store.proprio, "chunk": store.chunk,
        "reward": store.reward, "next_obs": store.next_obs,
        "next_proprio": store.next_proprio, "next_policy_chunk": next_chunks,
        "done": store.done,
    }


@dataclass
class OnlineResult:
    curve: list                  # (episode_index, success, moving_average)
    warm_start_success: float
    final_moving_average: float
    eps_half_sq_final: float
    noise_budget: float
    flow_params_unchanged: bool
    rounds_completed: int


def online_loop(policy: FlowPolicy, action_critic: DistributionalCritic,
                predictor: NoisePredictor, noise_critic: NoiseCritic,
                env_cfg: EnvConfig, cfg: SteerConfig, deploy: DeployConfig,
                rng: SeededRng, out_dir=None, log: bool = False) -> OnlineResult:
    """Alternate rollout rounds with optimization rounds.

    The flow policy stays frozen throughout (asserted bitwise at the end);
    only the noise predictor, the noise critic, and the action critic train.
    On divergence, current nets are checkpointed before the error propagates.
    """
    buffers = ReplayBuffers(off_capacity=cfg.off_capacity)
    env = LaceEnv(env_cfg)
    flow_snapshot = policy.net.params.copy()

    warm_rng = rng.split("warm")
    warm_successes = []
    for i in range(cfg.warm_start_episodes):
        res = rollout_episode(policy, env, warm_rng.split(i), deploy,
                              instruction=i % 2, source="offline-rollout",
                              episode_id=f"warm-{i:05d}")
        buffers.push_offline(_traj_to_buffer_batch(res.trajectory, policy,
                                                   action_critic.cfg))
        warm_successes.append(res.outcome.success)
    warm_rate = float(np.mean(warm_successes)) if warm_successes else float("nan")
    if log:
        print(f"  warm start: {warm_rate:.3f} over {cfg.warm_start_episodes} episodes",
              flush=True)

    curve = []
    successes = []
    eps_half_sq_final = float("nan")
    rounds_done = 0
    try:
        for rnd in range(cfg.rounds):
            roll_rng = rng.split("rollout", rnd)
            for i in range(cfg.episodes_per_round):
                res = rollout_episode(
                    policy, env, roll_rng.split(i), deploy,
                    instruction=(rnd * cfg.episodes_per_round + i) % 2,
                    eps_source=predictor.eps_source(), source="online-rollout",
                    episode_id=f"online-{rnd:03d}-{i:02d}")
                buffers.push_online(_traj_to_buffer_batch(res.trajectory, policy,
                                                          action_critic.cfg),
                                    checkpoint_id=rnd)
                successes.append(1 if res.outcome.success else 0)
                window = successes[-cfg.ma_window:]
                curve.append((len(successes) - 1, successes[-1],
                              float(np.mean(window))))
            train_rng = rng.split("train", rnd)
            eps_energy = []
            for step in range(cfg.steps_per_round):
                batch = buffers.sample(cfg.batch_size, train_rng.split("sample", step))
                action_critic.td_update(batch, train_rng.split("td", step))
                distill_noise_critic(noise_critic, action_critic, policy,
                                     predictor, batch, cfg,
                                     train_rng.split("distill", step))
                stats = actor_update(predictor, noise_critic,
                                     build_features(batch["obs"], batch["proprio"]),
                                     cfg, train_rng.split("actor", step))
                eps_energy.append(stats["eps_half_sq_mean"])
            eps_half_sq_final = float(np.mean(eps_energy))
            rounds_done = rnd + 1
            if log:
                ma = curve[-1][2] if curve else float("nan")
                print(f"  round {rnd + 1}/{cfg.rounds}: ma{cfg.ma_window} {ma:.3f} "
                      f"eps half-sq {eps_half_sq_final:.1f}", flush=True)
    except TrainingDivergence:
        if out_dir is not None:
            _checkpoint_all(out_dir, policy, action_critic, predictor, noise_critic,
                            curve, note="divergence")
        raise

    if out_dir is not None:
        _checkpoint_all(out_dir, policy, action_critic, predictor, noise_critic, curve)
    return OnlineResult(
        curve=curve,
        warm_start_success=warm_rate,
        final_moving_average=curve[-1][2] if curve else float("nan"),
        eps_half_sq_final=eps_half_sq_final,
        noise_budget=cfg.budget(policy.chunk_dim),
        flow_params_unchanged=bool(np.array_equal(policy.net.params, flow_snapshot)),
        rounds_completed=rounds_done,
    )


def _checkpoint_all(out_dir, policy, action_critic, predictor, noise_critic,
                    curve, note: str = "final") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    policy.save(out / "policy.lwnc")
    action_critic.save(out / "action_critic")
    predictor.save(out / "noise_predictor.lwnc")
    for name, net in zip(("noise_qa", "noise_qb"), noise_critic.nets):
        net.save(out / f"{name}.lwnc")
    rows = ["episode,success,moving_avg"]
    rows += [f"{e},{s},{ma:.6f}" for e, s, ma in curve]
    (out / "learning_curve.csv").write_text("\n".join(rows) + "\n")
    (out / "status.json").write_text(json.dumps({"note": note}))
