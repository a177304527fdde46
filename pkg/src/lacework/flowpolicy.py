"""Flow-matching chunk policy, behavior-cloning training, and deployment.

The policy is a velocity field v(features, x, u) over normalized action
chunks: training regresses v along the straight path from unit Gaussian
noise to a data chunk, sampling integrates the field with a fixed-step Euler
scheme from a given (or drawn) initial noise, so a chunk is a deterministic
function of (parameters, features, noise).

Deployment modes reproduce the usual chunking-policy post-processing:
execute whole chunks (raw), replan after a horizon (rh), or average all
live predictions with exponentially decaying weights plus a jerk clamp
(te). The mismatch statistic measures how far executed actions drift from
the freshest raw prediction, which is exactly zero without post-processing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .env import ACTION_DIM, OBS_DIM, PROPRIO_DIM, LaceEnv
from .errors import ContractViolation, TrainingDivergence
from .numcore import Mlp, SeededRng
from .numcore import autodiff as ad
from .trajectory import (
    DEFAULT_CHUNK,
    Trajectory,
    TransitionStore,
    actions_from_net,
    actions_to_net,
)

FEATURE_DIM = OBS_DIM + PROPRIO_DIM

# World coordinates get centered on the workspace midpoint and scaled up so
# the millimeter-scale structure the task hinges on sits at unit scale for
# the nets; boolean channels map to +-1. Positions of the coordinate entries
# follow the flat observation/proprio layout.
COORD_SCALE = np.float32(8.0)
_COORD_MASK = np.zeros(FEATURE_DIM, dtype=bool)
_COORD_MASK[:32] = True                       # nodes, eyelets, grippers
_COORD_MASK[[38, 39, 41, 42]] = True          # proprio gripper positions


def build_features(obs: np.ndarray, proprio: np.ndarray) -> np.ndarray:
    raw = np.concatenate([np.atleast_2d(obs), np.atleast_2d(proprio)], axis=-1)
    out = raw * np.float32(2.0) - np.float32(1.0)
    coords = (raw[..., _COORD_MASK] - np.float32(0.5)) * COORD_SCALE
    out[..., _COORD_MASK] = coords
    return out


@dataclass
class PolicyConfig:
    chunk: int = DEFAULT_CHUNK
    hidden: tuple = (256, 256, 256)
    euler_steps: int = 10
    lr: float = 3e-4
    batch_size: int = 256
    steps: int = 20_000
    max_gripper_step: float = 0.02
    # feature-space jitter during cloning; softens covariate shift at rollout
    input_noise: float = 0.0
    # endpoint stabilizers: exponential moving average of the parameters
    # (adopted at the end of training) and cosine decay of the learning rate
    ema_decay: float = 0.999
    lr_decay: bool = True


class FlowPolicy:
    def __init__(self, cfg: PolicyConfig, rng: SeededRng | None = None,
                 net: Mlp | None = None):
        self.cfg = cfg
        self.chunk_dim = cfg.chunk * ACTION_DIM
        widths = [FEATURE_DIM + self.chunk_dim + 1, *cfg.hidden, self.chunk_dim]
        self.net = net if net is not None else Mlp(widths, rng.split("policy"))

    # -- sampling -------------------------------------------------------------

    def sample_chunk_batch(self, obs: np.ndarray, proprio: np.ndarray,
                           eps: np.ndarray | None = None,
                           rng: SeededRng | None = None) -> np.ndarray:
        """Integrate the field for a batch; returns raw (B, k, action) chunks."""
        feats = build_features(obs, proprio)
        B = feats.shape[0]
        if eps is None:
            if rng is None:
                raise ContractViolation("need eps or rng")
            eps = rng.normal((B, self.chunk_dim))
        x = np.asarray(eps, dtype=np.float32).reshape(B, self.chunk_dim).copy()
        n = self.cfg.euler_steps
        dt = np.float32(1.0 / n)
        u_col = np.empty((B, 1), dtype=np.float32)
        for i in range(n):
            u_col[:] = np.float32(i / n)
            v = self.net.forward(np.concatenate([feats, x, u_col], axis=-1))
            x = x + dt * v
        chunk_net = x.reshape(B, self.cfg.chunk, ACTION_DIM)
        return actions_from_net(chunk_net, self.cfg.max_gripper_step)

    def sample_chunk(self, obs, proprio, eps=None, rng=None) -> np.ndarray:
        out = self.sample_chunk_batch(obs[None], proprio[None],
                                      None if eps is None else eps[None], rng)
        return out[0]

    # -- training -------------------------------------------------------------

    def fm_loss_graph(self, params: "ad.Node", feats: np.ndarray,
                      chunk_net: np.ndarray, eps: np.ndarray,
                      u: np.ndarray) -> "ad.Node":
        """Flow-matching regression: v((1-u)eps + u*a, u) toward (a - eps)."""
        dtype = params.dtype
        feats = feats.astype(dtype)
        a = chunk_net.reshape(len(feats), -1).astype(dtype)
        eps = eps.astype(dtype)
        u = u.reshape(-1, 1).astype(dtype)
        x_u = (1.0 - u) * eps + u * a
        inp = ad.leaf(np.concatenate([feats, x_u, u], axis=-1))
        v = self.net.forward_graph(inp, params)
        return ad.mse(v, ad.leaf(a - eps))

    def fm_loss(self, feats, chunk_net, rng: SeededRng) -> tuple:
        """Draw (eps, u), return (loss value, gradient) for one batch."""
        B = len(feats)
        eps = rng.normal((B, self.chunk_dim))
        u = rng.random((B,), dtype=np.float32)
        params = self.net.param_leaf()
        loss = self.fm_loss_graph(params, feats, chunk_net, eps, u)
        (g,) = ad.grad(loss, [params])
        return float(loss.value), g

    def bc_train(self, pool: TransitionStore, steps: int, rng: SeededRng,
                 log_every: int = 0) -> list:
        """Behavior cloning: `steps` optimizer steps of the flow-matching
        loss over minibatches from the pool. Returns the loss history."""
        if len(pool) == 0:
            raise ContractViolation("empty training pool")
        feats_all = build_features(pool.obs, pool.proprio)
        chunks_net = actions_to_net(pool.chunk, self.cfg.max_gripper_step)
        chunks_net = chunks_net.reshape(len(pool), -1)
        ema = self.net.params.copy() if self.cfg.ema_decay else None
        decay = np.float32(self.cfg.ema_decay)
        history = []
        for step in range(steps):
            idx = rng.integers(0, len(pool), shape=(self.cfg.batch_size,))
            feats = feats_all[idx]
            if self.cfg.input_noise > 0:
                feats = feats + rng.normal(feats.shape, scale=self.cfg.input_noise)
            loss, g = self.fm_loss(feats, chunks_net[idx], rng)
            if not np.isfinite(loss):
                raise TrainingDivergence("bc_train", f"loss non-finite at step {step}")
            lr = self.cfg.lr
            if self.cfg.lr_decay:
                lr = self.cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / max(steps, 1)))
            self.net.adam_step(g, lr, where=f"bc_train step {step}")
            if ema is not None:
                ema = decay * ema + (np.float32(1.0) - decay) * self.net.params
            history.append(loss)
            if log_every and (step + 1) % log_every == 0:
                recent = float(np.mean(history[-log_every:]))
                print(f"  bc step {step + 1}/{steps} loss {recent:.4f}", flush=True)
        if ema is not None and steps > 0:
            self.net.params = ema
        return history

    # -- persistence ------------------------------------------------------------

    def save(self, path) -> None:
        self.net.save(path)

    @classmethod
    def load(cls, path, cfg: PolicyConfig | None = None) -> "FlowPolicy":
        net = Mlp.load(path)
        cfg = cfg or PolicyConfig()
        expected = FEATURE_DIM + cfg.chunk * ACTION_DIM + 1
        if net.widths[0] != expected:
            raise ContractViolation(
                f"checkpoint input width {net.widths[0]} != config width {expected}")
        return cls(cfg, net=net)


# -- deployment -----------------------------------------------------------------


@dataclass
class DeployConfig:
    mode: str = "te"            # raw | rh | te
    horizon: int = 4            # executed steps per replan in rh mode
    ensemble_decay: float = 0.1
    # third-difference clamp per action dim; grip channels effectively free
    jerk_limit: tuple = (0.02, 0.02, 4.0, 0.02, 0.02, 4.0)

    def __post_init__(self):
        if self.mode not in ("raw", "rh", "te"):
            raise ContractViolation(f"unknown deploy mode {self.mode!r}")


@dataclass
class RolloutResult:
    trajectory: Trajectory
    outcome: object
    mismatch_mean: float
    milestones: dict


def rollout_episode(policy: FlowPolicy, env: LaceEnv, rng: SeededRng,
                    deploy: DeployConfig, instruction: int,
                    eps_source=None, source: str = "offline-rollout",
                    episode_id: str = "ep") -> RolloutResult:
    """Run one closed-loop episode under the given post-processing mode.

    `eps_source(features, rng) -> eps` overrides the unit-Gaussian initial
    noise (used by the online steering stage); actions actually executed are
    recorded in the trajectory.
    """
    k = policy.cfg.chunk
    obs = env.reset(rng.split("reset"), instruction)
    noise_rng = rng.split("noise")
    obs_rows, prop_rows, act_rows = [], [], []
    predictions = []          # (t_predicted, raw chunk)
    mismatch_sum, mismatch_n = 0.0, 0
    history = []              # executed actions for the jerk clamp
    outcome = None
    t = 0
    jerk = np.asarray(deploy.jerk_limit, dtype=np.float32)
    while outcome is None:
        prop = env.proprio()
        replan = (
            deploy.mode == "te"
            or not predictions
            or (deploy.mode == "raw" and t - predictions[-1][0] >= k)
            or (deploy.mode == "rh" and t - predictions[-1][0] >= deploy.horizon)
        )
        if replan:
            feats = build_features(obs, prop)
            if eps_source is not None:
                eps = eps_source(feats[0], noise_rng)
            else:
                eps = noise_rng.normal((policy.chunk_dim,))
            chunk = policy.sample_chunk(obs, prop, eps=eps)
            predictions.append((t, chunk))
            predictions = [(ti, c) for ti, c in predictions if t - ti < k]
        if deploy.mode == "te":
            weights, acts = [], []
            for ti, c in predictions:
                age = t - ti
                weights.append(np.exp(-deploy.ensemble_decay * age))
                acts.append(c[age])
            w = np.asarray(weights, dtype=np.float64)
            w /= w.sum()
            action = (w[:, None] * np.asarray(acts, dtype=np.float64)).sum(axis=0)
            action = action.astype(np.float32)
            if len(history) >= 3:
                a1, a2, a3 = history[-1], history[-2], history[-3]
                base = 3.0 * a1 - 3.0 * a2 + a3
                d3 = np.clip(action - base, -jerk, jerk)
                action = (base + d3).astype(np.float32)
        else:
            ti, c = predictions[-1]
            action = c[t - ti]
        freshest_t, freshest_c = predictions[-1]
        mismatch_sum += float(np.linalg.norm(action - freshest_c[t - freshest_t]))
        mismatch_n += 1
        history.append(action)
        obs_rows.append(obs)
        prop_rows.append(prop)
        act_rows.append(action)
        obs, outcome = env.step(action)
        t += 1
    traj = Trajectory(
        episode_id=episode_id, instruction=instruction,
        observations=np.asarray(obs_rows, dtype=np.float32),
        proprio=np.asarray(prop_rows, dtype=np.float32),
        actions=np.asarray(act_rows, dtype=np.float32),
        success=outcome.success, retry_keyframes=[], source=source)
    s = env.state
    milestones = {"pick": s.picked, "thread": bool(s.threaded[s.instruction]),
                  "handover": s.handed, "pull": s.pulled}
    return RolloutResult(traj, outcome, mismatch_sum / max(mismatch_n, 1), milestones)


def evaluate(policy: FlowPolicy, env_cfg, episodes: int, seed: int,
             deploy: DeployConfig, eps_source=None,
             source: str = "offline-rollout") -> dict:
    """Deploy the policy for `episodes` episodes; returns success rate,
    stage-milestone rates, and the train/deploy mismatch statistic."""
    env = LaceEnv(env_cfg)
    root = SeededRng(seed)
    results = []
    for i in range(episodes):
        res = rollout_episode(policy, env, root.split("episode", i), deploy,
                              instruction=i % 2, eps_source=eps_source,
                              source=source, episode_id=f"eval-{seed}-{i:05d}")
        results.append(res)
    succ = [r.outcome.success for r in results]
    stages = {name: float(np.mean([r.milestones[name] for r in results]))
              for name in ("pick", "thread", "handover", "pull")}
    return {
        "episodes": episodes,
        "success_rate": float(np.mean(succ)),
        "successes": int(np.sum(succ)),
        "stage_rates": stages,
        "mismatch_mean": float(np.mean([r.mismatch_mean for r in results])),
        "per_episode_success": [bool(s) for s in succ],
        "results": results,
    }
