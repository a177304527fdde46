"""Command-line entry points.

Subcommands cover the pipeline stages individually (demo, augment,
critic-train, filter, bc-train, eval, steer) plus `run`, which executes the
staged ablation from a key=value experiment file and exits nonzero if its
directional checks fail.
"""

from __future__ import annotations

import argparse
import json
import sys
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
from .filterpipe import filter_dataset
from .flowpolicy import DeployConfig, FlowPolicy, PolicyConfig, evaluate
from .harness import ExperimentSpec, progress_report, run_ablation, write_curve_csv
from .mirror import augment_dataset
from .numcore import SeededRng
from .steer import NoiseCritic, NoisePredictor, SteerConfig, online_loop
from .teleop import generate_demos
from .trajectory import TransitionStore, read_dataset, with_hindsight, write_dataset


def _env_config(args) -> EnvConfig:
    if getattr(args, "env_config", None):
        return EnvConfig.from_file(args.env_config)
    return EnvConfig()


def cmd_demo(args) -> int:
    cfg = _env_config(args)
    demos = generate_demos(cfg, args.episodes, seed_base=args.seed)
    write_dataset(args.out, demos)
    rate = float(np.mean([d.success for d in demos]))
    print(f"wrote {len(demos)} episodes to {args.out} (success {rate:.3f})")
    return 0


def cmd_augment(args) -> int:
    trajs = read_dataset(args.data)
    out = augment_dataset(trajs)
    write_dataset(args.out, out)
    print(f"augmented {len(trajs)} -> {len(out)} episodes at {args.out}")
    return 0


def cmd_bc_train(args) -> int:
    trajs = read_dataset(args.data)
    pool = TransitionStore.from_trajectories(trajs)
    flags_path = Path(args.data) / "excluded.json"
    if flags_path.exists():
        excluded = json.loads(flags_path.read_text())
        drop = set()
        by_id = {t.episode_id: j for j, t in enumerate(trajs)}
        for eid, steps in excluded.items():
            for t in steps:
                drop.add((by_id[eid], t))
        keep = np.asarray([(j, t) not in drop for j, t in
                           zip(pool.traj_index, pool.step_index)])
        pool = pool.subset(keep)
        print(f"excluding {len(drop)} flagged transitions, pool {len(pool)}")
    rng = SeededRng(args.seed)
    policy = FlowPolicy(PolicyConfig(steps=args.steps), rng)
    policy.bc_train(pool, args.steps, rng.split("bc"),
                    log_every=max(args.steps // 10, 1))
    policy.save(args.out)
    print(f"saved policy to {args.out}")
    return 0


def cmd_critic_train(args) -> int:
    trajs = read_dataset(args.data)
    rng = SeededRng(args.seed)
    cfg = CriticConfig(steps=args.steps, td_target=args.td_target)
    if args.regression:
        model, _ = train_progress_regressor(trajs, cfg, rng,
                                            log_every=max(args.steps // 10, 1))
        model.net.save(args.out)
        print(f"saved temporal-regression baseline to {args.out}")
        return 0
    store = TransitionStore.from_trajectories(with_hindsight(trajs))
    policy = None
    if cfg.td_target == "policy":
        if args.policy:
            policy = FlowPolicy.load(args.policy)
        else:
            print("no --policy given: cloning the dataset for the TD bootstrap")
            policy = FlowPolicy(PolicyConfig(steps=args.steps), rng.split("boot"))
            policy.bc_train(TransitionStore.from_trajectories(trajs), args.steps,
                            rng.split("boot", "bc"),
                            log_every=max(args.steps // 10, 1))
    if args.scalar:
        critic, _ = train_scalar_critic(store, policy, cfg, rng,
                                        log_every=max(args.steps // 10, 1))
        Path(args.out).mkdir(parents=True, exist_ok=True)
        for name, net in zip(("sa", "sb"), critic.nets):
            net.save(Path(args.out) / f"{name}.lwnc")
        print(f"saved scalar critic to {args.out}")
        return 0
    critic, _ = train_distributional_critic(store, policy, cfg, rng,
                                            log_every=max(args.steps // 10, 1))
    critic.save(args.out)
    print(f"saved critic to {args.out}")
    return 0


def cmd_filter(args) -> int:
    trajs = read_dataset(args.data)
    store = TransitionStore.from_trajectories(trajs)
    critic = DistributionalCritic.load(args.critic)
    filtered, report = filter_dataset(store, trajs, critic, delta=args.delta,
                                      statistic=args.statistic)
    report.to_json(args.report)
    write_dataset(args.out, trajs)
    excluded = {}
    for entry in report.per_trajectory:
        if entry["flagged_steps"]:
            excluded[entry["episode_id"]] = entry["flagged_steps"]
    (Path(args.out) / "excluded.json").write_text(json.dumps(excluded, indent=0))
    print(f"flagged {report.flagged_transitions}/{report.total_transitions} "
          f"transitions (recall_miss {report.recall_miss:.3f}, "
          f"precision {report.precision:.3f}); filtered dataset at {args.out}")
    return 0


def cmd_eval(args) -> int:
    policy = FlowPolicy.load(args.policy)
    deploy = DeployConfig(mode=args.mode)
    eps_source = None
    if args.predictor:
        from .numcore import Mlp
        cfg = SteerConfig()
        predictor = NoisePredictor(policy.chunk_dim, cfg,
                                   net=Mlp.load(args.predictor))
        eps_source = predictor.eps_source()
    res = evaluate(policy, _env_config(args), args.episodes, seed=args.seed,
                   deploy=deploy, eps_source=eps_source)
    res.pop("results")
    Path(args.report).write_text(json.dumps(res, indent=1))
    print(f"success {res['success_rate']:.3f} over {args.episodes} episodes "
          f"({args.mode}); mismatch {res['mismatch_mean']:.5f}; "
          f"report at {args.report}")
    return 0


def cmd_steer(args) -> int:
    policy = FlowPolicy.load(args.policy)
    critic = DistributionalCritic.load(args.critic)
    rng = SeededRng(args.seed)
    cfg = SteerConfig(rounds=args.rounds, warm_start_episodes=args.warm_start)
    predictor = NoisePredictor(policy.chunk_dim, cfg, rng.split("predictor"))
    noise_critic = NoiseCritic(policy.chunk_dim, critic.cfg.n_atoms, cfg,
                               rng.split("noise_critic"))
    deploy = DeployConfig(mode=args.mode)
    result = online_loop(policy, critic, predictor, noise_critic,
                         _env_config(args), cfg, deploy, rng.split("online"),
                         out_dir=args.out, log=True)
    write_curve_csv(result.curve, Path(args.out) / "learning_curve.csv")
    print(f"final ma{cfg.ma_window} {result.final_moving_average:.3f} "
          f"(warm start {result.warm_start_success:.3f}); "
          f"flow frozen: {result.flow_params_unchanged}")
    return 0


def cmd_run(args) -> int:
    spec = ExperimentSpec.from_file(args.config) if args.config else ExperimentSpec()
    if args.out:
        spec.out_dir = args.out
    summary = run_ablation(spec)
    rows = summary["rows"]
    names = [r["stage"] for r in rows]
    print("\nstage ordering:")
    for r in rows:
        print(f"  {r['stage']:>13s}: {r['mean_success']:.3f} "
              f"[{r['ci_low']:.3f}, {r['ci_high']:.3f}]")
    ok = summary["ordered"] and not summary["failures"]
    print("ordering holds" if ok else "ordering violated", f"({names})")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lacework")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo", help="generate scripted demonstrations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=300)
    p.add_argument("--out", required=True)
    p.add_argument("--env-config")
    p.set_defaults(fn=cmd_demo)

    p = sub.add_parser("augment", help="mirror-double a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("bc-train", help="behavior-clone a flow policy")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bc_train)

    p = sub.add_parser("critic-train", help="train a progress critic")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--td-target", choices=("policy", "in_sample"), default="policy")
    p.add_argument("--policy", help="BC policy checkpoint for the TD bootstrap")
    p.add_argument("--scalar", action="store_true")
    p.add_argument("--regression", action="store_true")
    p.set_defaults(fn=cmd_critic_train)

    p = sub.add_parser("filter", help="drop-filter a demo dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--critic", required=True)
    p.add_argument("--delta", type=float, default=0.15)
    p.add_argument("--statistic", choices=("peak_trough", "first_last"),
                   default="peak_trough")
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_filter)

    p = sub.add_parser("eval", help="deploy a policy")
    p.add_argument("--policy", required=True)
    p.add_argument("--mode", choices=("raw", "rh", "te"), default="te")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--predictor", help="noise predictor checkpoint (steered eval)")
    p.add_argument("--env-config")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("steer", help="online noise-steering RL")
    p.add_argument("--policy", required=True)
    p.add_argument("--critic", required=True)
    p.add_argument("--rounds", type=int, default=50)
    p.add_argument("--warm-start", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("raw", "rh", "te"), default="te")
    p.add_argument("--out", required=True)
    p.add_argument("--env-config")
    p.set_defaults(fn=cmd_steer)

    p = sub.add_parser("run", help="staged ablation from an experiment file")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_run)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
