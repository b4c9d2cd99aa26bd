"""Flat key=value configuration for the benchmark harness."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np


@dataclass
class Config:
    # trajectory / planner timing
    delta_td: float = 0.05
    delta_tc: float = 0.05
    rate_global: float = 20.0
    rate_local: float = 15.0
    # global planner
    d_z: float = 0.8
    lambda_smooth: float = 0.2
    lambda_obs: float = 0.6
    lambda_feasibility: float = 0.2
    lambda1: float = 0.8
    lambda2: float = 0.8
    lambda3: float = 0.6
    v_max: float = 0.6
    a_max: float = 1.0
    omega_max: float = 1.0
    n_r: int = 30
    box_radius: float = 1.6
    # local planner
    n_p: int = 15
    q_pos: float = 100.0
    q_yaw: float = 1.0
    r_v: float = 1.0
    r_omega: float = 0.1
    max_sqp_iter: int = 30
    # mapping
    update_range: float = 6.0
    resolution: float = 0.2
    max_distance: float = 5.0
    mapper_interval: int = 1
    close_obstacle_radius: float = 2.0
    # episode
    goal_tol: float = 0.5
    collision_radius: float = 0.4
    ref_speed: float = 0.55
    timeout: float = 300.0
    # forest generation defaults
    n_obstacles: int = 60
    radius_min: float = 0.3
    radius_max: float = 0.8

    def __post_init__(self):
        if self.delta_td <= 0 or self.delta_tc <= 0:
            raise ValueError("time steps must be positive")
        if self.n_p < 1 or self.n_r < 1:
            raise ValueError("horizons must be >= 1")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float):
                lines.append(f"{f.name}={v:.10g}")
            else:
                lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())


_INT_KEYS = {"n_p", "n_r", "mapper_interval", "n_obstacles", "max_sqp_iter"}
_VALID_KEYS = {f.name for f in fields(Config)}


def parse_config(text: str) -> Config:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if not sep or not key or not val:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        if key not in _VALID_KEYS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = int(val) if key in _INT_KEYS else float(val)
    return Config(**values)


def load_config(path) -> Config:
    with open(path) as fh:
        return parse_config(fh.read())


def global_config(cfg: Config):
    from .global_planner import GlobalConfig
    return GlobalConfig(
        d_z=cfg.d_z, lambda_smooth=cfg.lambda_smooth,
        lambda_obs=cfg.lambda_obs, lambda_feasibility=cfg.lambda_feasibility,
        lambda1=cfg.lambda1, lambda2=cfg.lambda2, lambda3=cfg.lambda3,
        v_max=np.full(3, cfg.v_max), a_max=np.full(3, cfg.a_max),
        delta_td=cfg.delta_td, refine_length=cfg.n_r,
        box_radius=cfg.box_radius)


def local_config(cfg: Config, pos_min=None, pos_max=None):
    from .local_planner import LocalConfig
    return LocalConfig(
        n_p=cfg.n_p, delta_tc=cfg.delta_tc, delta_td=cfg.delta_td,
        d_z=cfg.d_z, v_max=cfg.v_max, omega_max=cfg.omega_max,
        q_pos=cfg.q_pos, q_yaw=cfg.q_yaw, r_v=cfg.r_v, r_omega=cfg.r_omega,
        pos_min=pos_min, pos_max=pos_max, max_sqp_iter=cfg.max_sqp_iter)
