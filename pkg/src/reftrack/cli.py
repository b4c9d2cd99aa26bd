"""Benchmark command line: generate / run / suite / breakdown."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench, plots
from .config import Config, load_config


def _parse_seeds(spec: str) -> list:
    seeds = []
    for part in spec.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ValueError(f"no seeds in {spec!r}")
    return seeds


def _load_configs(path: str) -> list:
    """A config file or a directory of them -> [(label, Config)]."""
    if os.path.isdir(path):
        out = []
        for name in sorted(os.listdir(path)):
            if name.endswith(".txt") or name.endswith(".cfg"):
                label = os.path.splitext(name)[0]
                out.append((label, load_config(os.path.join(path, name))))
        if not out:
            raise ValueError(f"no .txt/.cfg config files in {path}")
        return out
    label = os.path.splitext(os.path.basename(path))[0]
    return [(label, load_config(path))]


def _cmd_generate(args) -> int:
    env = bench.generate_forest(
        args.seed, extent=tuple(args.extent), n_obstacles=args.n_obstacles,
        radius_range=(args.radius_min, args.radius_max))
    bench.save_environment(env, args.out)
    print(f"wrote {args.out}: {len(env.obstacles)} obstacles, "
          f"start {env.start.tolist()} goal {env.goal.tolist()}")
    return 0


def _cmd_run(args) -> int:
    env = bench.load_environment(args.env)
    cfg = load_config(args.config) if args.config else Config()
    log = bench.TimingLog()
    traj_rows = []
    metrics = bench.simulate_episode(env, cfg, mode=args.mode,
                                     timing_log=log,
                                     trajectory_out=traj_rows)
    bench.write_metrics_json(metrics, args.out, args.mode)
    print(f"wrote {args.out} (success={metrics.success}, "
          f"distance={metrics.traversed_distance:.2f} m, "
          f"cycles={metrics.n_cycles})")
    if args.timing_log:
        log.write(args.timing_log)
        print(f"wrote {args.timing_log}")
    if args.traj_out:
        with open(args.traj_out, "w") as fh:
            fh.write("t,x,y,z,yaw,min_clearance\n")
            for row in traj_rows:
                fh.write(",".join(f"{v:.9g}" for v in row) + "\n")
        print(f"wrote {args.traj_out}")
    if args.figdir:
        plots.ensure_figdir(args.figdir)
        ref = bench.build_reference(env.start, env.goal, cfg)
        fig1 = plots.plot_trajectory(
            env, traj_rows, os.path.join(args.figdir, "trajectory.png"),
            reference=ref.control_points)
        report = bench.record_runtime_breakdown(log)
        fig2 = plots.plot_breakdown(
            report, os.path.join(args.figdir, "runtime_breakdown.png"))
        print(f"wrote {fig1}\nwrote {fig2}")
    return 0


def _cmd_suite(args) -> int:
    seeds = _parse_seeds(args.seeds)
    configs = _load_configs(args.configs)
    table = bench.run_suite(seeds, configs, mode=args.mode)
    with open(args.out, "w") as fh:
        fh.write(table.to_csv())
    print(f"wrote {args.out}")
    if args.records:
        with open(args.records, "w") as fh:
            for rec in table.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        print(f"wrote {args.records}")
    if args.figdir:
        plots.ensure_figdir(args.figdir)
        _suite_figure(table, os.path.join(args.figdir, "suite_summary.png"))
        print(f"wrote {os.path.join(args.figdir, 'suite_summary.png')}")
    for row in table.rows:
        print(f"  {row['config']}: SF={row['sf']:.3f} "
              f"MCT={row['mct_mean'] * 1e3:.1f}±{row['mct_sd'] * 1e3:.1f} ms "
              f"dist mean/max/min = {row['dist_mean']:.2f}/"
              f"{row['dist_max']:.2f}/{row['dist_min']:.2f} m")
    return 0


def _suite_figure(table, out_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    labels = [r["config"] for r in table.rows]
    sfs = [r["sf"] for r in table.rows]
    dists = [r["dist_mean"] for r in table.rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.bar(range(len(labels)), sfs, color="tab:green")
    ax1.set_xticks(range(len(labels)))
    ax1.set_xticklabels(labels, rotation=20, ha="right")
    ax1.set_ylabel("success fraction")
    ax1.set_ylim(0, 1.05)
    ax2.bar(range(len(labels)), dists, color="tab:blue")
    ax2.set_xticks(range(len(labels)))
    ax2.set_xticklabels(labels, rotation=20, ha="right")
    ax2.set_ylabel("mean distance (successes) [m]")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def _cmd_breakdown(args) -> int:
    log = bench.TimingLog.read(args.log)
    report = bench.record_runtime_breakdown(log)
    csv = bench.breakdown_csv(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(csv)
    if args.figdir:
        plots.ensure_figdir(args.figdir)
        out = plots.plot_breakdown(
            report, os.path.join(args.figdir, "runtime_breakdown.png"))
        print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bench",
        description="Closed-loop trajectory refinement/tracking benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a random forest environment")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--n-obstacles", type=int, default=60)
    g.add_argument("--radius-min", type=float, default=0.3)
    g.add_argument("--radius-max", type=float, default=0.8)
    g.add_argument("--extent", type=float, nargs=3,
                   default=[40.0, 40.0, 10.0])
    g.set_defaults(func=_cmd_generate)

    r = sub.add_parser("run", help="run one closed-loop episode")
    r.add_argument("--env", required=True)
    r.add_argument("--config", default=None)
    r.add_argument("--mode", choices=["lockstep", "realtime"],
                   default="lockstep")
    r.add_argument("--out", required=True, help="metrics JSON path")
    r.add_argument("--timing-log", default=None)
    r.add_argument("--traj-out", default=None, help="trajectory CSV path")
    r.add_argument("--figdir", default=None,
                   help="directory for rendered figures")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("suite", help="run a benchmark suite")
    s.add_argument("--seeds", required=True, help="e.g. 1..12 or 1,2,5")
    s.add_argument("--configs", required=True,
                   help="config file or directory of config files")
    s.add_argument("--out", required=True, help="table CSV path")
    s.add_argument("--records", default=None, help="raw records JSONL path")
    s.add_argument("--mode", choices=["lockstep", "realtime"],
                   default="lockstep")
    s.add_argument("--figdir", default=None)
    s.set_defaults(func=_cmd_suite)

    b = sub.add_parser("breakdown", help="aggregate a per-cycle timing log")
    b.add_argument("--log", required=True)
    b.add_argument("--out", default=None)
    b.add_argument("--figdir", default=None)
    b.set_defaults(func=_cmd_breakdown)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
