"""Command-line interface.

One binary, subcommands for the full pipeline: synthesize a world, train,
run odometry or full SLAM on a sequence, run the multi-agent simulation,
and evaluate trajectories and map memory.  A single ``--seed`` governs all
randomness, making every subcommand bit-reproducible.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .dataset import read_sequence, write_sequence
from .evaluation import ape, memory_report
from .kitti_io import read_kitti_poses, read_trajectory, write_trajectory
from .multiagent import CooperativeHub
from .nn import load_weights, save_weights
from .slam.engine import SlamEngine
from .slam.graph import load_graph, save_graph
from .synth import SynthWorldConfig, generate_world, sequence_from_world
from .training.trainer import train


def _add_seed(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")


def cmd_synth(args) -> int:
    cfg = cfgmod.synth_config_from_file(args.config)
    cfg = dataclasses.replace(cfg, seed=args.seed)
    world = generate_world(cfg)
    out = Path(args.out)
    if cfg.trajectory == "multi-agent-cross":
        for agent in range(cfg.n_agents):
            seq = sequence_from_world(world, cfg, agent)
            write_sequence(seq, out / f"agent{agent}")
        print(f"wrote {cfg.n_agents} agent sequences to {out}")
    else:
        seq = sequence_from_world(world, cfg, 0)
        write_sequence(seq, out)
        print(f"wrote {len(seq)} scans to {out}")
    return 0


def cmd_train(args) -> int:
    config = cfgmod.train_config_from_file(args.config)
    if args.seq:
        dataset = read_sequence(args.seq)
    else:
        world_cfg = cfgmod.synth_config_from_file(args.world)
        world_cfg = dataclasses.replace(world_cfg, seed=args.seed)
        dataset = sequence_from_world(generate_world(world_cfg), world_cfg, 0)
    store = train(dataset, config, seed=args.seed, log_path=args.log)
    save_weights(store, args.out_weights)
    checkpoint = {
        "seed": args.seed,
        "config": dataclasses.asdict(config),
        "rng_seed": store.rng_seed,
    }
    Path(args.out_weights + ".train.json").write_text(
        json.dumps(checkpoint, indent=2, sort_keys=True) + "\n"
    )
    print(f"trained {len(store)} parameters -> {args.out_weights}")
    return 0


def _run_engine(args, enable_loops: bool):
    enc, dec, slam_cfg = cfgmod.slam_configs_from_file(args.config)
    slam_cfg = dataclasses.replace(slam_cfg, enable_loop_closure=enable_loops)
    store = load_weights(args.weights)
    dataset = read_sequence(args.seq)
    engine = SlamEngine(store, enc, dec, slam_cfg)
    engine.run(dataset.scans, dataset.timestamps)
    stamps, poses = engine.trajectory()
    write_trajectory(args.out_traj, stamps, poses)
    if getattr(args, "out_log", None):
        with open(args.out_log, "w") as f:
            for ev in engine.events:
                f.write(json.dumps(ev, sort_keys=True) + "\n")
    return engine


def cmd_odometry(args) -> int:
    engine = _run_engine(args, enable_loops=False)
    print(f"odometry: {len(engine.records)} scans, {len(engine.keyframe_ids)} keyframes")
    return 0


def cmd_slam(args) -> int:
    engine = _run_engine(args, enable_loops=True)
    if args.out_graph:
        save_graph(engine.graph, args.out_graph)
    loops = sum(1 for e in engine.graph.edges if e.kind == "loop")
    print(
        f"slam: {len(engine.records)} scans, {len(engine.keyframe_ids)} keyframes, "
        f"{loops} loop edges"
    )
    return 0


def cmd_multiagent(args) -> int:
    world_cfg = cfgmod.synth_config_from_file(args.world)
    world_cfg = dataclasses.replace(
        world_cfg, seed=args.seed, trajectory="multi-agent-cross", n_agents=args.agents
    )
    enc, dec, slam_cfg = cfgmod.slam_configs_from_file(args.config)
    store = load_weights(args.weights)
    world = generate_world(world_cfg)
    sequences = {
        a: sequence_from_world(world, world_cfg, a) for a in range(args.agents)
    }
    engines = [
        SlamEngine(store, enc, dec, slam_cfg, agent_id=a, id_offset=a * 1_000_000)
        for a in range(args.agents)
    ]
    hub = CooperativeHub(
        engines,
        channel_enabled=not args.no_channel,
        cap_bytes_per_step=args.cap_bytes,
    )
    hub.run({a: sequences[a].scans for a in range(args.agents)})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hub.write_event_log(out / "events.jsonl")
    report = {
        "components": hub.component_count(),
        "total_bytes": hub.stats.total_bytes,
        "messages": hub.stats.message_count,
        "per_agent": {},
        "merge_timeline": [
            ev for ev in hub.events if ev["event"] in ("cross_merge", "joint_optimize")
        ],
    }
    for a in range(args.agents):
        stamps, poses = engines[a].trajectory()
        write_trajectory(out / f"agent{a}_trajectory.txt", stamps, poses)
        gt = sequences[a].gt_poses
        report["per_agent"][str(a)] = {
            "scans": len(stamps),
            "keyframes": len(engines[a].keyframe_ids),
            "ape": ape(poses, gt) if gt else None,
        }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report["per_agent"], sort_keys=True))
    return 0


def _read_pose_file(path: str):
    first = Path(path).read_text().splitlines()[0].split()
    if len(first) == 13:
        return read_trajectory(path)[1]
    return read_kitti_poses(path)


def cmd_eval_ape(args) -> int:
    est = _read_pose_file(args.est)
    gt = _read_pose_file(args.gt)
    value = ape(est, gt)
    print(f"{value:.6f}")
    return 0


def cmd_mem_report(args) -> int:
    graph = load_graph(args.graph)
    seq = read_sequence(args.seq)
    report = memory_report(graph, seq, voxel_size=args.voxel_size)
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="descriptor-slam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sequence")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train encoder, decoder and overlap head")
    p.add_argument("--config", required=True)
    p.add_argument("--seq", help="training sequence directory")
    p.add_argument("--world", help="synthetic world config (alternative to --seq)")
    p.add_argument("--out-weights", required=True)
    p.add_argument("--log", help="JSONL training log path")
    _add_seed(p)
    p.set_defaults(func=cmd_train)

    for name, func in (("odometry", cmd_odometry), ("slam", cmd_slam)):
        p = sub.add_parser(name, help=f"run {name} on a sequence")
        p.add_argument("--weights", required=True)
        p.add_argument("--seq", required=True)
        p.add_argument("--out-traj", required=True)
        p.add_argument("--out-log", help="JSONL event log path")
        p.add_argument("--config", help="model/slam config file")
        if name == "slam":
            p.add_argument("--out-graph", help="graph snapshot path")
        _add_seed(p)
        p.set_defaults(func=func)

    p = sub.add_parser("multiagent", help="cooperative SLAM simulation")
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--world", required=True, help="synthetic world config")
    p.add_argument("--weights", required=True)
    p.add_argument("--config", help="model/slam config file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cap-bytes", type=int, default=None, help="channel bytes per step")
    p.add_argument("--no-channel", action="store_true")
    _add_seed(p)
    p.set_defaults(func=cmd_multiagent)

    p = sub.add_parser("eval-ape", help="absolute pose error of a trajectory")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_eval_ape)

    p = sub.add_parser("mem-report", help="map memory accounting")
    p.add_argument("--graph", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--voxel-size", type=float, default=0.2)
    _add_seed(p)
    p.set_defaults(func=cmd_mem_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    np.random.seed(args.seed)  # belt and braces; all code paths use Generators
    if args.command == "train" and not (args.seq or args.world):
        print("train: provide --seq or --world", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
