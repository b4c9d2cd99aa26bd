"""Closed-loop benchmark harness.

Random pillar forests, the two-rate mapper/global/local loop, episode
metrics, suite aggregation and the runtime breakdown.  Lockstep mode runs
everything on one task in a fixed order (one mapper/global/local tick per
simulated control step), which makes whole suites bit-reproducible; realtime
mode runs the mapper+global planner on a background thread against wall-clock
periods.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .config import Config, global_config, local_config
from .core import (AgentState, TrajectoryDomainError, UniformBSplineTrajectory,
                   evaluate, prepend_pose, window, wrap_angle)
from .global_planner import refine
from .local_planner import build_nmpc, solve_nmpc
from .mapping import (VoxelGrid, close_in_obstacles, compute_edt,
                      insert_points, query_distance)

TIMING_CATEGORIES = ("nmpc", "edt", "smoothing+feasibility", "gradients",
                     "pushing")


class GenerationFailed(Exception):
    """Forest generation could not place all obstacles."""


@dataclass
class Environment:
    seed: int
    extent: np.ndarray
    obstacles: np.ndarray        # (K, 6) rows cx cy cz sx sy sz
    start: np.ndarray
    goal: np.ndarray

    def __post_init__(self):
        self.extent = np.asarray(self.extent, dtype=float).reshape(3)
        self.obstacles = np.asarray(self.obstacles, dtype=float).reshape(-1, 6)
        self.start = np.asarray(self.start, dtype=float).reshape(3)
        self.goal = np.asarray(self.goal, dtype=float).reshape(3)


def default_poses(extent) -> tuple:
    """Start and goal on the x centerline, 0.7 m inside the arena walls."""
    extent = np.asarray(extent, dtype=float)
    z = min(1.5, 0.5 * extent[2])
    start = np.array([0.7, 0.5 * extent[1], z])
    goal = np.array([extent[0] - 0.7, 0.5 * extent[1], z])
    return start, goal


def generate_forest(seed: int, extent=(40.0, 40.0, 10.0),
                    n_obstacles: int = 60, radius_range=(0.3, 0.8),
                    height_range=None, start=None, goal=None,
                    keepout: float = 0.8) -> Environment:
    """Seeded random pillar forest.

    Pillars are full-height square boxes unless ``height_range`` is given.
    Placements whose center lies (horizontally) within
    ``keepout + radius_range[1]`` of the start or goal are rejected and
    redrawn; after 100*n failed draws GenerationFailed is raised.
    """
    extent = np.asarray(extent, dtype=float).reshape(3)
    if start is None or goal is None:
        d_start, d_goal = default_poses(extent)
        start = d_start if start is None else np.asarray(start, dtype=float)
        goal = d_goal if goal is None else np.asarray(goal, dtype=float)
    rng = np.random.default_rng(seed)
    r_min, r_max = radius_range
    clearance = keepout + r_max
    boxes = []
    attempts = 0
    max_attempts = 100 * max(n_obstacles, 1)
    while len(boxes) < n_obstacles:
        attempts += 1
        if attempts > max_attempts:
            raise GenerationFailed(
                f"placed {len(boxes)}/{n_obstacles} obstacles "
                f"in {max_attempts} draws")
        r = rng.uniform(r_min, r_max)
        x = rng.uniform(r, extent[0] - r)
        y = rng.uniform(r, extent[1] - r)
        if height_range is None:
            h = extent[2]
        else:
            h = rng.uniform(height_range[0], height_range[1])
        c = np.array([x, y])
        if (np.linalg.norm(c - start[:2]) < clearance
                or np.linalg.norm(c - goal[:2]) < clearance):
            continue
        boxes.append([x, y, 0.5 * h, 2.0 * r, 2.0 * r, h])
    return Environment(seed=seed, extent=extent,
                       obstacles=np.asarray(boxes, dtype=float).reshape(-1, 6),
                       start=start, goal=goal)


def save_environment(env: Environment, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# seed={env.seed}"
                 f" extent={env.extent[0]:.10g} {env.extent[1]:.10g}"
                 f" {env.extent[2]:.10g}"
                 f" start={env.start[0]:.10g} {env.start[1]:.10g}"
                 f" {env.start[2]:.10g}"
                 f" goal={env.goal[0]:.10g} {env.goal[1]:.10g}"
                 f" {env.goal[2]:.10g}\n")
        for row in env.obstacles:
            fh.write(" ".join(f"{v:.10g}" for v in row) + "\n")


def load_environment(path) -> Environment:
    seed = 0
    extent = start = goal = None
    boxes = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                toks = line[1:].split()
                vals = []
                key = None
                parsed = {}
                for tok in toks:
                    if "=" in tok:
                        if key is not None:
                            parsed[key] = vals
                        key, _, first = tok.partition("=")
                        vals = [first]
                    else:
                        vals.append(tok)
                if key is not None:
                    parsed[key] = vals
                if "seed" in parsed:
                    seed = int(parsed["seed"][0])
                if "extent" in parsed:
                    extent = np.array([float(v) for v in parsed["extent"]])
                if "start" in parsed:
                    start = np.array([float(v) for v in parsed["start"]])
                if "goal" in parsed:
                    goal = np.array([float(v) for v in parsed["goal"]])
                continue
            boxes.append([float(v) for v in line.split()])
    if extent is None or start is None or goal is None:
        raise ValueError(f"{path}: missing extent/start/goal header")
    return Environment(seed=seed, extent=extent,
                       obstacles=np.asarray(boxes, dtype=float).reshape(-1, 6),
                       start=start, goal=goal)


def surface_points(env: Environment, resolution: float) -> np.ndarray:
    """Sample every box face on a grid of the given spacing (a lidar sees
    surfaces, not volumes)."""
    pts = []
    for cx, cy, cz, sx, sy, sz in env.obstacles:
        lo = np.array([cx - sx / 2, cy - sy / 2, cz - sz / 2])
        hi = np.array([cx + sx / 2, cy + sy / 2, cz + sz / 2])
        axes = []
        for a in range(3):
            n = max(2, int(round((hi[a] - lo[a]) / resolution)) + 1)
            axes.append(np.linspace(lo[a], hi[a], n))
        for a in range(3):
            u, v = (a + 1) % 3, (a + 2) % 3
            uu, vv = np.meshgrid(axes[u], axes[v], indexing="ij")
            for bound in (lo[a], hi[a]):
                face = np.empty((uu.size, 3))
                face[:, a] = bound
                face[:, u] = uu.ravel()
                face[:, v] = vv.ravel()
                pts.append(face)
    if not pts:
        return np.zeros((0, 3))
    return np.vstack(pts)


def build_reference(start, goal, cfg: Config) -> UniformBSplineTrajectory:
    """Straight constant-speed spline from start to goal at ``ref_speed``."""
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    dist = float(np.linalg.norm(goal - start))
    step = cfg.ref_speed * cfg.delta_td
    n_seg = max(1, int(math.ceil(dist / step)))
    line = start + np.linspace(0.0, 1.0, n_seg + 1)[:, None] * (goal - start)
    ctrl = np.vstack([np.repeat(start[None, :], 3, axis=0),
                      line,
                      np.repeat(goal[None, :], 3, axis=0)])
    return UniformBSplineTrajectory(ctrl, cfg.delta_td, t0=0.0)


@dataclass
class EpisodeMetrics:
    success: bool
    collided: bool
    timed_out: bool
    traversed_distance: float
    min_clearance: float
    final_goal_distance: float
    n_cycles: int
    sim_time: float
    mean_tracking_error: float
    max_tracking_error: float
    refine_failures: int
    seed: int
    mode: str
    mct: float = 0.0
    wall_time: float = 0.0
    mean_times: dict = field(default_factory=dict)

    def deterministic_dict(self) -> dict:
        return {
            "seed": self.seed,
            "mode": self.mode,
            "success": bool(self.success),
            "collided": bool(self.collided),
            "timed_out": bool(self.timed_out),
            "traversed_distance": float(self.traversed_distance),
            "min_clearance": float(self.min_clearance),
            "final_goal_distance": float(self.final_goal_distance),
            "n_cycles": int(self.n_cycles),
            "sim_time": float(self.sim_time),
            "mean_tracking_error": float(self.mean_tracking_error),
            "max_tracking_error": float(self.max_tracking_error),
            "refine_failures": int(self.refine_failures),
        }

    def timing_dict(self) -> dict:
        return {
            "mct": float(self.mct),
            "wall_time": float(self.wall_time),
            "mean_times": {k: float(v) for k, v in self.mean_times.items()},
        }

    def full_dict(self) -> dict:
        out = self.deterministic_dict()
        out.update(self.timing_dict())
        return out


class TimingLog:
    """Per-cycle wall times, one (cycle, module, seconds) record each."""

    def __init__(self):
        self.records = []

    def add(self, cycle: int, module: str, seconds: float):
        self.records.append((cycle, module, seconds))

    def write(self, path):
        with open(path, "w") as fh:
            for cycle, module, seconds in self.records:
                fh.write(f"{cycle},{module},{seconds:.9f}\n")

    @staticmethod
    def read(path):
        log = TimingLog()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                cycle, module, seconds = line.split(",")
                log.add(int(cycle), module, float(seconds))
        return log


class _EpisodeCore:
    """Shared state and per-tick work of one episode, mode-agnostic."""

    def __init__(self, env: Environment, cfg: Config):
        self.env = env
        self.cfg = cfg
        dims = tuple(int(math.ceil(e / cfg.resolution)) for e in env.extent)
        self.grid = VoxelGrid(np.zeros(3), cfg.resolution, dims)
        self.surface = surface_points(env, cfg.resolution)
        self.traj = build_reference(env.start, env.goal, cfg)
        heading = math.atan2(*(env.goal - env.start)[[1, 0]])
        self.agent = AgentState(env.start.copy(), heading)
        self.gcfg = global_config(cfg)
        self.lcfg = local_config(cfg, pos_min=np.zeros(3), pos_max=env.extent)
        self.edt = None
        self.warm = None
        self.sim_time = 0.0
        self.traversed = 0.0
        self.min_clearance = float("inf")
        self.track_errors = []
        self.refine_failures = 0
        self.done = False
        self.collided = False
        self.success = False
        self.lock = threading.Lock()

    # -- mapper ------------------------------------------------------------
    def sense_and_map(self, t_n: float):
        agent_pos = self.agent.position
        if len(self.surface):
            d = np.linalg.norm(self.surface - agent_pos, axis=1)
            seen = self.surface[d <= self.cfg.update_range]
            insert_points(self.grid, seen, agent_pos, self.cfg.update_range)
        # Crop that covers everything queried this cycle plus the clamp
        # distance, so values match the full-grid clamped EDT there.
        win = window(self.traj, t_n, max(self.cfg.n_r, self.cfg.n_p + 1))
        region = np.vstack([win.points, agent_pos[None, :]])
        pad = (self.cfg.close_obstacle_radius + self.cfg.max_distance
               + max(2.0, self.cfg.collision_radius) + 0.5)
        lo_idx = self.grid.world_to_index(region.min(axis=0) - pad)[0]
        hi_idx = self.grid.world_to_index(region.max(axis=0) + pad)[0] + 1
        lo_idx = np.maximum(lo_idx, 0)
        hi_idx = np.minimum(hi_idx, np.asarray(self.grid.dims))
        sub = self.grid.occupancy[lo_idx[0]:hi_idx[0],
                                  lo_idx[1]:hi_idx[1],
                                  lo_idx[2]:hi_idx[2]]
        crop = VoxelGrid(self.grid.origin + lo_idx * self.cfg.resolution,
                         self.cfg.resolution, sub.shape,
                         np.ascontiguousarray(sub))
        return compute_edt(crop, self.cfg.max_distance)

    # -- global planner ----------------------------------------------------
    def refine_tick(self, t_n: float, edt):
        win = window(self.traj, t_n, self.cfg.n_r)
        win = prepend_pose(win, self.agent)
        result = refine(win, edt, self.gcfg)
        if result.status == "failed":
            self.refine_failures += 1
        refined = result.window.points[1:]
        with self.lock:
            self.traj.control_points[win.c_s:win.c_e + 1] = refined
        return result

    # -- local planner -----------------------------------------------------
    def nmpc_tick(self, t_n: float, edt):
        win = window(self.traj, t_n, self.cfg.n_p + 1)
        win = prepend_pose(win, self.agent)
        obstacles = close_in_obstacles(edt, win,
                                       self.cfg.close_obstacle_radius)
        prob = build_nmpc(win, self.agent, obstacles, self.lcfg)
        sol = solve_nmpc(prob, self.warm)
        self.warm = sol
        return sol

    # -- simulator ---------------------------------------------------------
    def apply(self, sol, t_n: float, edt) -> None:
        u = sol.first_command()
        pos = self.agent.position + u.v * self.cfg.delta_tc
        yaw = wrap_angle(self.agent.yaw + u.omega_z * self.cfg.delta_tc)
        self.traversed += float(np.linalg.norm(u.v) * self.cfg.delta_tc)
        self.agent = AgentState(pos, yaw)
        self.sim_time = t_n + self.cfg.delta_tc

        clearance = query_distance(edt, pos)
        self.min_clearance = min(self.min_clearance, clearance)
        self.track_errors.append(self._tracking_error(self.sim_time))
        if clearance < self.cfg.collision_radius:
            self.collided = True
            self.done = True
        elif np.linalg.norm(pos - self.env.goal) <= self.cfg.goal_tol:
            self.success = True
            self.done = True
        elif self.sim_time >= self.cfg.timeout:
            self.done = True

    def _tracking_error(self, t_n: float) -> float:
        t = min(t_n, self.traj.t_end - 1e-9)
        try:
            ref = evaluate(self.traj, t, 0)
        except TrajectoryDomainError:
            ref = self.env.goal
        return float(np.linalg.norm(self.agent.position - ref))

    def metrics(self, mode: str, wall_time: float,
                log: TimingLog) -> EpisodeMetrics:
        n_cycles = max(1, len(self.track_errors))
        sums = {}
        counts = {}
        for _, module, seconds in log.records:
            sums[module] = sums.get(module, 0.0) + seconds
            counts[module] = counts.get(module, 0) + 1
        mean_times = {m: sums[m] / counts[m] for m in sums}
        planner = sum(sums.get(m, 0.0) for m in
                      ("nmpc", "smoothing+feasibility", "gradients", "pushing"))
        errors = self.track_errors or [0.0]
        return EpisodeMetrics(
            success=self.success and not self.collided,
            collided=self.collided,
            timed_out=not self.success and not self.collided,
            traversed_distance=self.traversed,
            min_clearance=self.min_clearance,
            final_goal_distance=float(
                np.linalg.norm(self.agent.position - self.env.goal)),
            n_cycles=len(self.track_errors),
            sim_time=self.sim_time,
            mean_tracking_error=float(np.mean(errors)),
            max_tracking_error=float(np.max(errors)),
            refine_failures=self.refine_failures,
            seed=self.env.seed, mode=mode,
            mct=planner / n_cycles, wall_time=wall_time,
            mean_times=mean_times)


def simulate_episode(env: Environment, cfg: Config, mode: str = "lockstep",
                     timing_log: TimingLog = None,
                     trajectory_out: list = None) -> EpisodeMetrics:
    """Run one closed-loop episode to goal, collision or timeout.

    ``trajectory_out``, when given, collects per-cycle
    (t, x, y, z, yaw, clearance) rows for plotting.
    """
    if mode == "lockstep":
        return _run_lockstep(env, cfg, timing_log, trajectory_out)
    if mode == "realtime":
        return _run_realtime(env, cfg, timing_log, trajectory_out)
    raise ValueError(f"unknown mode {mode!r}")


def _run_lockstep(env, cfg, timing_log, trajectory_out):
    core = _EpisodeCore(env, cfg)
    log = timing_log if timing_log is not None else TimingLog()
    wall_start = time.perf_counter()
    max_cycles = int(math.ceil(cfg.timeout / cfg.delta_tc))
    interval = max(1, cfg.mapper_interval)
    for cycle in range(max_cycles):
        t_n = cycle * cfg.delta_tc
        if core.edt is None or cycle % interval == 0:
            t0 = time.perf_counter()
            core.edt = core.sense_and_map(t_n)
            log.add(cycle, "edt", time.perf_counter() - t0)
        result = core.refine_tick(t_n, core.edt)
        for module, seconds in result.timings.items():
            log.add(cycle, module, seconds)
        t0 = time.perf_counter()
        sol = core.nmpc_tick(t_n, core.edt)
        log.add(cycle, "nmpc", time.perf_counter() - t0)
        core.apply(sol, t_n, core.edt)
        if trajectory_out is not None:
            trajectory_out.append([core.sim_time, *core.agent.position,
                                   core.agent.yaw, core.min_clearance])
        if core.done:
            break
    return core.metrics("lockstep", time.perf_counter() - wall_start, log)


def _run_realtime(env, cfg, timing_log, trajectory_out):
    core = _EpisodeCore(env, cfg)
    log = timing_log if timing_log is not None else TimingLog()
    log_lock = threading.Lock()
    stop = threading.Event()
    wall_start = time.perf_counter()

    def global_loop():
        period = 1.0 / cfg.rate_global
        cycle = 0
        while not stop.is_set():
            tick_start = time.perf_counter()
            t_n = core.sim_time
            try:
                t0 = time.perf_counter()
                edt = core.sense_and_map(t_n)
                t1 = time.perf_counter()
                with core.lock:
                    core.edt = edt
                result = core.refine_tick(t_n, edt)
                with log_lock:
                    log.add(cycle, "edt", t1 - t0)
                    for module, seconds in result.timings.items():
                        log.add(cycle, module, seconds)
            except Exception:
                stop.set()
                raise
            cycle += 1
            sleep = period - (time.perf_counter() - tick_start)
            if sleep > 0:
                stop.wait(sleep)

    worker = threading.Thread(target=global_loop, daemon=True)
    worker.start()
    try:
        period = 1.0 / cfg.rate_local
        cycle = 0
        while not core.done:
            tick_start = time.perf_counter()
            with core.lock:
                edt = core.edt
            if edt is None:
                time.sleep(0.001)
                continue
            t_n = core.sim_time
            t0 = time.perf_counter()
            sol = core.nmpc_tick(t_n, edt)
            with log_lock:
                log.add(cycle, "nmpc", time.perf_counter() - t0)
            core.apply(sol, t_n, edt)
            if trajectory_out is not None:
                trajectory_out.append([core.sim_time, *core.agent.position,
                                       core.agent.yaw, core.min_clearance])
            cycle += 1
            sleep = period - (time.perf_counter() - tick_start)
            if sleep > 0:
                time.sleep(sleep)
    finally:
        stop.set()
        worker.join(timeout=2.0)
    return core.metrics("realtime", time.perf_counter() - wall_start, log)


@dataclass
class BenchmarkTable:
    rows: list
    records: list

    def to_csv(self) -> str:
        header = ("config,episodes,sf,mct_mean,mct_sd,"
                  "dist_mean,dist_max,dist_min")
        lines = [header]
        for r in self.rows:
            lines.append(
                f"{r['config']},{r['episodes']},{r['sf']:.6g},"
                f"{r['mct_mean']:.6g},{r['mct_sd']:.6g},"
                f"{r['dist_mean']:.6g},{r['dist_max']:.6g},"
                f"{r['dist_min']:.6g}")
        return "\n".join(lines) + "\n"


def run_suite(env_seeds, configs, mode: str = "lockstep",
              forest_kwargs: dict = None) -> BenchmarkTable:
    """Every (config, seed) episode; aggregates per config.

    ``configs`` is a list of (label, Config).  Start and goal poses are the
    same across all seeds.  Distance statistics cover successful episodes
    only.
    """
    env_seeds = list(env_seeds)
    if not env_seeds or not configs:
        raise ValueError("need at least one seed and one config")
    rows, records = [], []
    for label, cfg in configs:
        fk = dict(forest_kwargs or {})
        fk.setdefault("n_obstacles", cfg.n_obstacles)
        fk.setdefault("radius_range", (cfg.radius_min, cfg.radius_max))
        fk.setdefault("keepout", cfg.d_z)
        metrics_list = []
        for seed in env_seeds:
            env = generate_forest(seed, **fk)
            m = simulate_episode(env, cfg, mode=mode)
            metrics_list.append(m)
            rec = {"config": label}
            rec.update(m.deterministic_dict())
            if mode != "lockstep":
                rec.update(m.timing_dict())
            records.append(rec)
        successes = [m for m in metrics_list if m.success]
        dists = [m.traversed_distance for m in successes]
        mcts = [m.mct for m in metrics_list]
        rows.append({
            "config": label,
            "episodes": len(metrics_list),
            "sf": len(successes) / len(metrics_list),
            "mct_mean": float(np.mean(mcts)),
            "mct_sd": float(np.std(mcts)),
            "dist_mean": float(np.mean(dists)) if dists else float("nan"),
            "dist_max": float(np.max(dists)) if dists else float("nan"),
            "dist_min": float(np.min(dists)) if dists else float("nan"),
        })
    return BenchmarkTable(rows=rows, records=records)


def record_runtime_breakdown(log: TimingLog) -> dict:
    """Mean/sd/count of wall time per sub-module category."""
    samples = {}
    for _, module, seconds in log.records:
        samples.setdefault(module, []).append(seconds)
    report = {}
    for module in sorted(samples):
        arr = np.asarray(samples[module])
        report[module] = {"mean": float(arr.mean()), "sd": float(arr.std()),
                          "count": int(len(arr))}
    return report


def breakdown_csv(report: dict) -> str:
    lines = ["module,mean_s,sd_s,count"]
    for module, st in report.items():
        lines.append(f"{module},{st['mean']:.9f},{st['sd']:.9f},{st['count']}")
    return "\n".join(lines) + "\n"


def write_metrics_json(metrics: EpisodeMetrics, path, mode: str) -> None:
    """Metrics JSON; in lockstep the timing fields go to a sidecar file so
    reruns with identical seeds produce byte-identical metrics."""
    if mode == "lockstep":
        payload = metrics.deterministic_dict()
        sidecar = str(path) + ".timings.json"
        with open(sidecar, "w") as fh:
            json.dump(metrics.timing_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        payload = metrics.full_dict()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
