"""Command-line entry point.

Subcommands cover the whole pipeline: depth-data collection, the three
training drivers, collision-data collection, evaluation, replay plotting,
aggregation and gradient checking. Every command accepts --config (JSON,
defaults otherwise); the HYBRIDNAV_OUT environment variable supplies the
default output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import collision as cnet
from . import depthnet, harness, nn, policy
from .config import config_hash, load_config
from .errors import StartupError
from .records import EpisodeRecord


def _outdir(args) -> Path:
    out = Path(args.out if args.out else os.environ.get("HYBRIDNAV_OUT", "artifacts"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _add_common(p):
    p.add_argument("--config", default=None, help="JSON config file (defaults apply)")
    p.add_argument("--out", default=None,
                   help="output directory (default $HYBRIDNAV_OUT or ./artifacts)")


def cmd_collect_depth_data(args):
    cfg = load_config(args.config)
    out = _outdir(args)
    images, targets, meta = harness.collect_depth_data(cfg, args.pairs, args.seed)
    meta["config_hash"] = config_hash(cfg)
    dataset_dir = out / "depth_data"
    depthnet.save_depth_dataset(dataset_dir, images, targets, meta)
    print(f"wrote {len(images)} pairs to {dataset_dir}")


def cmd_train_depth(args):
    cfg = load_config(args.config)
    out = _outdir(args)
    images, targets, _ = depthnet.load_depth_dataset(args.data)
    if args.epochs:
        cfg.depth.epochs = args.epochs
    net = depthnet.build_depth_net(np.random.default_rng([args.seed, 11]))
    log = depthnet.train_depth(net, images, targets, cfg.depth,
                               np.random.default_rng([args.seed, 12]))
    ckpt = out / "depth_net.npz"
    nn.save_checkpoint(net, ckpt)
    depthnet.write_training_log(log, out / "depth_training_log.csv")
    print(f"final validation huber {log[-1]['val_huber']:.4f}; checkpoint {ckpt}")


def cmd_train_policy(args):
    cfg = load_config(args.config)
    out = _outdir(args)
    channel = harness.build_channel(cfg)
    net = nn.load_checkpoint(args.resume) if args.resume else None
    if args.steps:
        cfg.policy.train_steps = args.steps
    net, log = policy.train_policy(
        cfg.policy, cfg.vehicle, cfg.course, channel, args.seed, net=net,
        penalty=args.penalty,
        progress=(lambda s, row: print(f"step {s}: episode {row['episode']} "
                                       f"{row['outcome']} return {row['return']:.1f}"))
        if args.verbose else None)
    ckpt = out / "policy_net.npz"
    nn.save_checkpoint(net, ckpt)
    policy.write_policy_log(log, out / "policy_training_log.csv")
    done = [r for r in log if r["outcome"] == "completed"]
    print(f"{len(log)} episodes, completion {len(done) / max(1, len(log)):.2%}; "
          f"checkpoint {ckpt}")


def cmd_collect_collision_data(args):
    cfg = load_config(args.config)
    out = _outdir(args)
    nets = {}
    if args.pilot == "rl-only":
        if not args.policy:
            raise StartupError("rl-only collection needs --policy checkpoint")
        nets["policy"] = nn.load_checkpoint(args.policy)
    obs, actions, labels, meta = harness.collect_collision_data(
        cfg, nets, args.episodes, args.seed, pilot=args.pilot)
    meta["config_hash"] = config_hash(cfg)
    name = "collision_data" if args.pilot == "rl-only" else "collision_data_straight"
    dataset_dir = out / name
    cnet.save_collision_dataset(dataset_dir, obs, actions, labels, meta)
    print(f"wrote {len(obs)} frames ({int(labels.sum())} positive) to {dataset_dir}")


def cmd_train_collision(args):
    cfg = load_config(args.config)
    out = _outdir(args)
    obs, actions, labels, index = cnet.load_collision_dataset(args.data)
    n_val = max(1, int(len(obs) * cfg.collision.val_fraction))
    order = np.random.default_rng([args.seed, 21]).permutation(len(obs))
    val, train = order[:n_val], order[n_val:]
    net = cnet.build_collision_net(np.random.default_rng([args.seed, 22]))
    cnet.train_collision(net, obs[train], actions[train], labels[train],
                         cfg.collision, np.random.default_rng([args.seed, 23]),
                         batches=args.batches or None)
    report = cnet.validate_collision(net, obs[val], actions[val], labels[val],
                                     cfg.collision,
                                     np.random.default_rng([args.seed, 24]))
    suffix = "_straight" if index.get("provenance") == "straight-only" else ""
    ckpt = out / f"collision_net{suffix}.npz"
    nn.save_checkpoint(net, ckpt)
    with open(out / f"collision_validation{suffix}.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"validation accuracy {report['accuracy']:.3f}; checkpoint {ckpt}")


def cmd_evaluate(args):
    cfg = load_config(args.config)
    out = _outdir(args)
    if args.episodes:
        cfg.eval.episodes = args.episodes
    paths = {"policy": args.policy, "collision": args.collision,
             "collision_straight": args.collision_straight, "depth": args.depth}
    paths = {k: v for k, v in paths.items() if v}
    report, summaries = harness.run_evaluation(
        args.controller, cfg.eval.episodes, args.seed, cfg,
        net_paths=paths, workers=args.workers)
    stem = f"eval_{args.controller}"
    with open(out / f"{stem}.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    harness.write_episode_csv(summaries, out / f"{stem}_episodes.csv")
    print(f"{args.controller}: completion {report['completion_rate']:.1%}, "
          f"collision {report['collision_rate']:.1%} over {report['episodes']} episodes")
    if args.record_traces:
        nets = harness._load_nets_from_paths(paths)
        recs = [harness.run_episode(args.controller, args.seed + i, cfg, nets)
                for i in range(args.record_traces)]
        for rec in recs:
            rec.save(out / f"{stem}_seed{rec.seed}.json")
        harness.plot_record(recs, cfg.course, out / f"{stem}_trajectories.png")


def cmd_aggregate(args):
    out = _outdir(args)
    reports = []
    for path in args.reports:
        with open(path) as fh:
            reports.append(json.load(fh))
    written = harness.aggregate_and_emit(reports, out)
    for w in written:
        print(f"wrote {w}")


def cmd_replay(args):
    cfg = load_config(args.config)
    out = _outdir(args)
    rec = EpisodeRecord.load(args.record)
    path = out / (Path(args.record).stem + ".png")
    harness.plot_record(rec, cfg.course, path)
    print(f"wrote {path}")


def cmd_gradcheck(args):
    from .gradchecks import run_gradient_checks
    failures = run_gradient_checks(verbose=True)
    if failures:
        print(f"{failures} gradient check(s) FAILED")
        sys.exit(1)
    print("all gradient checks passed")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="hybridnav",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect-depth-data", help="render matched RGB/depth pairs")
    _add_common(p)
    p.add_argument("--pairs", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_collect_depth_data)

    p = sub.add_parser("train-depth", help="train the depth CNN")
    _add_common(p)
    p.add_argument("--data", required=True, help="depth dataset directory")
    p.add_argument("--epochs", type=int, default=0, help="override schedule")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_depth)

    p = sub.add_parser("train-policy", help="train the Q-policy in the simulator")
    _add_common(p)
    p.add_argument("--steps", type=int, default=0, help="override training budget")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", default=None, help="resume from a checkpoint")
    p.add_argument("--penalty", type=float, default=None,
                   help="collision penalty (resume with a new value to fine-tune)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train_policy)

    p = sub.add_parser("collect-collision-data",
                       help="label rollout frames with the collision window")
    _add_common(p)
    p.add_argument("--episodes", type=int, default=300)
    p.add_argument("--seed", type=int, default=5000)
    p.add_argument("--pilot", choices=("rl-only", "straight-only"), default="rl-only")
    p.add_argument("--policy", default=None, help="policy checkpoint for rl-only")
    p.set_defaults(fn=cmd_collect_collision_data)

    p = sub.add_parser("train-collision", help="train a collision predictor")
    _add_common(p)
    p.add_argument("--data", required=True, help="collision dataset directory")
    p.add_argument("--batches", type=int, default=0, help="override schedule")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_collision)

    p = sub.add_parser("evaluate", help="run a seeded evaluation sweep")
    _add_common(p)
    p.add_argument("--controller", required=True, choices=harness.CONTROLLER_SPECS)
    p.add_argument("--episodes", type=int, default=0)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--policy", default=None)
    p.add_argument("--collision", default=None)
    p.add_argument("--collision-straight", dest="collision_straight", default=None)
    p.add_argument("--depth", default=None)
    p.add_argument("--record-traces", type=int, default=0,
                   help="also save/plot this many episode traces")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("aggregate", help="merge evaluation reports into the results table")
    _add_common(p)
    p.add_argument("--reports", nargs="+", required=True)
    p.set_defaults(fn=cmd_aggregate)

    p = sub.add_parser("replay", help="plot a saved episode record")
    _add_common(p)
    p.add_argument("--record", required=True)
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
