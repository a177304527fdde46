"""Experiment orchestration: the staged ablation, progress reports, plots.

Stages build on each other per seed: scripted demos, behavior cloning on
everything, the progress critic (bootstrapping the cloned policy), drop
filtering, cloning on the filtered pool, mirror doubling of that pool,
cloning again, then online noise steering from the strongest offline
policy. Every artifact is a deterministic function of (config, seed) and
lands under the output directory as checkpoints plus CSV/PNG summaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .critic import (
    CriticConfig,
    DistributionalCritic,
    train_distributional_critic,
    train_progress_regressor,
    train_scalar_critic,
)
from .env import EnvConfig
from .errors import ContractViolation
from .filterpipe import FilterReport, filter_dataset, flag_suboptimal
from .flowpolicy import DeployConfig, FlowPolicy, PolicyConfig, evaluate
from .keyval import read_keyval
from .mirror import mirror_trajectory
from .numcore import SeededRng
from .steer import NoiseCritic, NoisePredictor, SteerConfig, online_loop
from .teleop import TeleopConfig, generate_demos
from .trajectory import (
    TransitionStore,
    critic_transitions,
    read_dataset,
    write_dataset,
)

STAGE_ORDER = ("plain_bc", "filtered_bc", "augmented_bc", "online")


# -- small statistics helpers ---------------------------------------------------


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple:
    """95% binomial confidence interval (Wilson score)."""
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def _ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    ranks[order] = np.arange(len(x), dtype=np.float64)
    # average ranks over ties
    vals, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    sums = np.zeros(len(vals))
    np.add.at(sums, inverse, ranks)
    return sums[inverse] / counts[inverse]


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ContractViolation("need two equal-length sequences")
    rx, ry = _ranks(x), _ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


def kendall(x, y) -> float:
    """Kendall rank agreement (tau-a; pairwise concordance)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ContractViolation("need two equal-length sequences")
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    upper = np.triu_indices(len(x), k=1)
    return float((dx[upper] * dy[upper]).mean())


# -- experiment configuration -------------------------------------------------------


@dataclass
class ExperimentSpec:
    out_dir: str = "runs/ablation"
    seeds: tuple = (0, 1, 2)
    demo_episodes: int = 300
    holdout_episodes: int = 22
    eval_episodes: int = 100
    bc_steps: int = 20_000
    critic_steps: int = 20_000
    delta: float = 0.15
    deploy_mode: str = "te"
    rounds: int = 50
    warm_start_episodes: int = 200
    episodes_per_round: int = 12
    steps_per_round: int = 50
    steer_eval_episodes: int = 300
    run_online: bool = True
    td_target: str = "policy"

    def __post_init__(self):
        if len(self.seeds) < 1:
            raise ContractViolation("need at least one seed")
        if self.demo_episodes < 50:
            raise ContractViolation("need at least 50 demo episodes")

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        raw = read_keyval(path)
        kwargs = {}
        for f in fields(cls):
            if f.name in raw:
                v = raw[f.name]
                if f.name == "seeds":
                    v = tuple(v) if isinstance(v, list) else (v,)
                kwargs[f.name] = v
        return cls(**kwargs)

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(steps=self.bc_steps)

    def critic_config(self) -> CriticConfig:
        return CriticConfig(steps=self.critic_steps, td_target=self.td_target)

    def steer_config(self) -> SteerConfig:
        return SteerConfig(rounds=self.rounds,
                           warm_start_episodes=self.warm_start_episodes,
                           episodes_per_round=self.episodes_per_round,
                           steps_per_round=self.steps_per_round)

    def deploy_config(self) -> DeployConfig:
        return DeployConfig(mode=self.deploy_mode)


def augment_store(store: TransitionStore, trajs) -> TransitionStore:
    """Double a (possibly filtered) transition pool with its mirror image.

    Flags transfer to the mirrored copies by symmetry: the surviving
    (trajectory, step) pairs are mirrored directly instead of re-scoring.
    """
    mirrored = [mirror_trajectory(t) for t in trajs]
    full = TransitionStore.from_trajectories(mirrored, k=store.k, gamma=store.gamma)
    kept = set(zip(store.traj_index.tolist(), store.step_index.tolist()))
    mask = np.asarray([(j, t) in kept for j, t in
                       zip(full.traj_index, full.step_index)], dtype=bool)
    mirror_part = full.subset(mask)
    arrays = {name: np.concatenate([store.arrays[name], mirror_part.arrays[name]])
              for name in store.arrays}
    return TransitionStore(
        arrays,
        np.concatenate([store.traj_index, mirror_part.traj_index + len(trajs)]),
        np.concatenate([store.step_index, mirror_part.step_index]),
        store.k, store.gamma)


# -- per-seed pipeline ----------------------------------------------------------------


def run_pipeline(spec: ExperimentSpec, seed: int, log: bool = True) -> dict:
    """All stages for one seed. Returns artifacts and metrics."""
    out = Path(spec.out_dir) / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    env_cfg = EnvConfig()
    log_every = max(spec.bc_steps // 4, 1) if log else 0

    def say(msg):
        if log:
            print(f"[seed {seed}] {msg}", flush=True)

    # demos (+ held-out successful episodes for critic quality checks)
    demo_base = 100_000 * (seed + 1)
    demos = generate_demos(env_cfg, spec.demo_episodes, seed_base=demo_base)
    holdout_all = generate_demos(env_cfg, spec.holdout_episodes,
                                 seed_base=demo_base + spec.demo_episodes)
    holdout = [t for t in holdout_all if t.success][:20]
    write_dataset(out / "demos", demos)
    say(f"demos: {len(demos)} episodes, "
        f"success {np.mean([d.success for d in demos]):.3f}, "
        f"keyframes/ep {np.mean([len(d.retry_keyframes) for d in demos]):.2f}")

    pool_all = TransitionStore.from_trajectories(demos)
    rng = SeededRng(seed)

    # stage: behavior cloning on everything
    plain = FlowPolicy(spec.policy_config(), rng.split("plain"))
    plain.bc_train(pool_all, spec.bc_steps, rng.split("plain", "bc"),
                   log_every=log_every)
    plain.save(out / "policy_plain.lwnc")

    # stage: progress critic on demos + hindsight failures
    critic_store = critic_transitions(demos)
    critic, _ = train_distributional_critic(
        critic_store, plain, spec.critic_config(), rng.split("critic"),
        log_every=max(spec.critic_steps // 4, 1) if log else 0)
    critic.save(out / "critic")

    # stage: drop filtering
    filtered, report = filter_dataset(pool_all, demos, critic, delta=spec.delta)
    report.to_json(out / "filter_report.json")
    say(f"filter: removed {report.fraction_removed:.3f} "
        f"(recall_miss {report.recall_miss:.3f}, precision {report.precision:.3f})")

    # stage: cloning on the filtered pool
    filtered_bc = FlowPolicy(spec.policy_config(), rng.split("filtered"))
    filtered_bc.bc_train(filtered, spec.bc_steps, rng.split("filtered", "bc"),
                         log_every=log_every)
    filtered_bc.save(out / "policy_filtered.lwnc")

    # stage: mirror augmentation of the filtered pool
    augmented = augment_store(filtered, demos)
    aug_bc = FlowPolicy(spec.policy_config(), rng.split("augmented"))
    aug_bc.bc_train(augmented, spec.bc_steps, rng.split("augmented", "bc"),
                    log_every=log_every)
    aug_bc.save(out / "policy_augmented.lwnc")

    # evaluations under the deployment post-processing
    deploy = spec.deploy_config()
    evals = {}
    for name, policy in (("plain_bc", plain), ("filtered_bc", filtered_bc),
                         ("augmented_bc", aug_bc)):
        res = evaluate(policy, env_cfg, spec.eval_episodes,
                       seed=7_000_000 + seed, deploy=deploy)
        res.pop("results")
        evals[name] = res
        say(f"{name}: success {res['success_rate']:.3f} "
            f"stages {res['stage_rates']}")

    result = {
        "seed": seed,
        "out_dir": str(out),
        "demo_success": float(np.mean([d.success for d in demos])),
        "filter_report": report,
        "evals": evals,
        "paths": {
            "plain": str(out / "policy_plain.lwnc"),
            "filtered": str(out / "policy_filtered.lwnc"),
            "augmented": str(out / "policy_augmented.lwnc"),
            "critic": str(out / "critic"),
            "demos": str(out / "demos"),
        },
        "holdout": holdout,
        "demos": demos,
        "critic": critic,
        "policies": {"plain_bc": plain, "filtered_bc": filtered_bc,
                     "augmented_bc": aug_bc},
    }

    if spec.run_online:
        steer_cfg = spec.steer_config()
        predictor = NoisePredictor(aug_bc.chunk_dim, steer_cfg, rng.split("predictor"))
        noise_critic = NoiseCritic(aug_bc.chunk_dim, critic.cfg.n_atoms, steer_cfg,
                                   rng.split("noise_critic"))
        online = online_loop(aug_bc, critic, predictor, noise_critic, env_cfg,
                             steer_cfg, deploy, rng.split("online"),
                             out_dir=out / "online", log=log)
        steered = evaluate(aug_bc, env_cfg, spec.steer_eval_episodes,
                           seed=8_000_000 + seed, deploy=deploy,
                           eps_source=predictor.eps_source(),
                           source="online-rollout")
        steered.pop("results")
        unsteered = evaluate(aug_bc, env_cfg, spec.steer_eval_episodes,
                             seed=8_000_000 + seed, deploy=deploy)
        unsteered.pop("results")
        say(f"online: steered {steered['success_rate']:.3f} vs "
            f"unsteered {unsteered['success_rate']:.3f}, "
            f"final ma {online.final_moving_average:.3f}")
        evals["online"] = steered
        result["online"] = online
        result["online_unsteered"] = unsteered
        result["predictor"] = predictor

    return result


# -- aggregation, reports, plots ----------------------------------------------------------


def ablation_table(per_seed: list, spec: ExperimentSpec) -> list:
    """Rows of (stage, mean success, pooled CI, per-seed rates)."""
    rows = []
    for stage in STAGE_ORDER:
        if stage not in per_seed[0]["evals"]:
            continue
        rates = [r["evals"][stage]["success_rate"] for r in per_seed]
        succ = sum(r["evals"][stage]["successes"] for r in per_seed)
        n = sum(r["evals"][stage]["episodes"] for r in per_seed)
        lo, hi = wilson_interval(succ, n)
        stage_rates = {name: float(np.mean([r["evals"][stage]["stage_rates"][name]
                                            for r in per_seed]))
                       for name in ("pick", "thread", "handover", "pull")}
        rows.append({
            "stage": stage, "mean_success": float(np.mean(rates)),
            "ci_low": lo, "ci_high": hi, "n": n,
            "per_seed": rates, "stage_rates": stage_rates,
        })
    return rows


def write_ablation_csv(rows: list, path) -> None:
    header = ("stage,mean_success,ci_low,ci_high,n,"
              "pick,thread,handover,pull,per_seed")
    lines = [header]
    for r in rows:
        sr = r["stage_rates"]
        per_seed = ";".join(f"{v:.4f}" for v in r["per_seed"])
        lines.append(
            f"{r['stage']},{r['mean_success']:.4f},{r['ci_low']:.4f},"
            f"{r['ci_high']:.4f},{r['n']},{sr['pick']:.4f},{sr['thread']:.4f},"
            f"{sr['handover']:.4f},{sr['pull']:.4f},{per_seed}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_curve_csv(curve: list, path) -> None:
    lines = ["episode,success,moving_avg"]
    lines += [f"{e},{s},{ma:.6f}" for e, s, ma in curve]
    Path(path).write_text("\n".join(lines) + "\n")


def plot_ablation(rows: list, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [r["stage"] for r in rows]
    means = [r["mean_success"] for r in rows]
    err_lo = [r["mean_success"] - r["ci_low"] for r in rows]
    err_hi = [r["ci_high"] - r["mean_success"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, means, yerr=[err_lo, err_hi], capsize=4, color="#4878d0")
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1)
    ax.set_title("staged training ablation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_stage_breakdown(rows: list, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stages = ("pick", "thread", "handover", "pull")
    width = 0.8 / len(rows)
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = np.arange(len(stages))
    for i, r in enumerate(rows):
        vals = [r["stage_rates"][s] for s in stages]
        ax.bar(xs + i * width, vals, width, label=r["stage"])
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(stages)
    ax.set_ylabel("fraction reaching milestone")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_learning_curve(curves: dict, ma_window: int, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for seed, curve in curves.items():
        eps = [c[0] for c in curve]
        succ = [c[1] for c in curve]
        ma = [c[2] for c in curve]
        ax.plot(eps, succ, ".", alpha=0.25, markersize=3)
        ax.plot(eps, ma, label=f"seed {seed} (ma{ma_window})")
    ax.set_xlabel("online episode")
    ax.set_ylabel("success")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_ablation(spec: ExperimentSpec, log: bool = True) -> dict:
    """Full multi-seed ablation; writes CSVs and plots, returns the table."""
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_seed = []
    failures = []
    for seed in spec.seeds:
        try:
            per_seed.append(run_pipeline(spec, seed, log=log))
        except Exception as exc:  # preserve partial results
            failures.append({"seed": seed, "error": repr(exc)})
            if log:
                print(f"[seed {seed}] stage failure: {exc!r}", flush=True)
            raise
    rows = ablation_table(per_seed, spec)
    write_ablation_csv(rows, out / "ablation.csv")
    plot_ablation(rows, out / "ablation_success.png")
    plot_stage_breakdown(rows, out / "stage_breakdown.png")
    if spec.run_online:
        curves = {r["seed"]: r["online"].curve for r in per_seed}
        for seed, curve in curves.items():
            write_curve_csv(curve, out / f"learning_curve_seed{seed}.csv")
        plot_learning_curve(curves, spec.steer_config().ma_window,
                            out / "learning_curve.png")
    ordered = all(rows[i]["mean_success"] < rows[i + 1]["mean_success"]
                  for i in range(len(rows) - 1))
    summary = {
        "rows": rows,
        "ordered": ordered,
        "failures": failures,
        "per_seed": per_seed,
    }
    (out / "summary.json").write_text(json.dumps(
        {"rows": rows, "ordered": ordered, "failures": failures},
        indent=1, default=float))
    return summary


# -- critic-quality report -----------------------------------------------------------------


def progress_report(critic, scalar, regressor, holdout, train_store,
                    train_trajs, delta: float, out_csv=None) -> dict:
    """Head-to-head progress quality: rank correlation with time on held-out
    successes, and drop-detection quality against env ground truth."""
    k = train_store.k
    models = {"distributional": critic, "scalar": scalar, "regression": regressor}
    rho_rows = []
    spearman_by_model = {}
    for name, model in models.items():
        if model is None:
            continue
        corrs = []
        for traj in holdout:
            sub = TransitionStore.from_trajectories([traj], k=k,
                                                    gamma=train_store.gamma)
            rho = model.progress(sub.obs, sub.proprio, sub.chunk)
            corrs.append(spearman(np.arange(len(rho)), rho))
            rho_rows += [(traj.episode_id, name, t, float(r))
                         for t, r in enumerate(rho)]
        spearman_by_model[name] = float(np.mean(corrs))
    detection = {}
    for name, model in models.items():
        if model is None:
            continue
        _, rep = filter_dataset(train_store, train_trajs, model, delta=delta)
        detection[name] = {"recall_miss": rep.recall_miss,
                           "recall_any": rep.recall_any,
                           "precision": rep.precision,
                           "fraction_removed": rep.fraction_removed}
    if out_csv is not None:
        lines = ["episode_id,model,t,rho"]
        lines += [f"{eid},{m},{t},{r:.6f}" for eid, m, t, r in rho_rows]
        Path(out_csv).write_text("\n".join(lines) + "\n")
    return {"spearman": spearman_by_model, "detection": detection}
