"""Figure rendering for benchmark reports.

Everything draws straight to files (Agg backend); the CLI calls these next
to its delimited outputs.
"""

from __future__ import annotations

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from matplotlib.patches import Circle, Rectangle

_STYLE = {
    "figure.figsize": (6.0, 5.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
}


def _styled():
    return plt.rc_context(_STYLE)


def plot_trajectory(env, trajectory_rows, out_path, reference=None) -> str:
    """Top-down view: obstacle footprints, start/goal, flown path."""
    with _styled():
        fig, ax = plt.subplots()
        for cx, cy, cz, sx, sy, sz in env.obstacles:
            ax.add_patch(Rectangle((cx - sx / 2, cy - sy / 2), sx, sy,
                                   color="0.55", zorder=1))
        if reference is not None and len(reference):
            ax.plot(reference[:, 0], reference[:, 1], "--", color="tab:blue",
                    lw=1.0, label="reference", zorder=2)
        if trajectory_rows is not None and len(trajectory_rows):
            xs = [r[1] for r in trajectory_rows]
            ys = [r[2] for r in trajectory_rows]
            ax.plot(xs, ys, color="tab:red", lw=1.3, label="flown", zorder=3)
        ax.add_patch(Circle(env.start[:2], 0.3, color="tab:green", zorder=4))
        ax.add_patch(Circle(env.goal[:2], 0.3, color="tab:orange", zorder=4))
        ax.set_xlim(0, env.extent[0])
        ax.set_ylim(0, env.extent[1])
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.legend(loc="upper right")
        fig.tight_layout()
        fig.savefig(out_path)
        plt.close(fig)
    return str(out_path)


def plot_breakdown(report: dict, out_path) -> str:
    """Mean wall time per sub-module, with standard-deviation bars."""
    modules = list(report.keys())
    means = [report[m]["mean"] * 1e3 for m in modules]
    sds = [report[m]["sd"] * 1e3 for m in modules]
    with _styled():
        fig, ax = plt.subplots(figsize=(6.0, 3.5))
        ax.bar(range(len(modules)), means, yerr=sds, capsize=3,
               color="tab:blue")
        ax.set_xticks(range(len(modules)))
        ax.set_xticklabels(modules, rotation=20, ha="right")
        ax.set_ylabel("mean time per call [ms]")
        fig.tight_layout()
        fig.savefig(out_path)
        plt.close(fig)
    return str(out_path)


def plot_tracking_error(trajectory_rows, reference_fn, out_path) -> str:
    """Position error against the time-indexed reference."""
    import numpy as np
    ts = [r[0] for r in trajectory_rows]
    errs = []
    for r in trajectory_rows:
        ref = reference_fn(r[0])
        errs.append(float(np.linalg.norm(np.asarray(r[1:4]) - ref)))
    with _styled():
        fig, ax = plt.subplots(figsize=(6.0, 3.0))
        ax.plot(ts, errs, color="tab:red", lw=1.0)
        ax.set_xlabel("time [s]")
        ax.set_ylabel("tracking error [m]")
        fig.tight_layout()
        fig.savefig(out_path)
        plt.close(fig)
    return str(out_path)


def ensure_figdir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
