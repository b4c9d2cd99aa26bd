"""Uniform B-spline reference trajectories and window extraction.

Points are plain numpy arrays: a single point is shape (3,), an ordered set of
points is shape (N, 3), all float64, in meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

DEGREE = 3

# Cubic basis and its u-derivatives on one span, rows are the four active
# control points, evaluated at local parameter u in [0, 1).
_BASIS = np.array([
    [-1.0, 3.0, -3.0, 1.0],
    [3.0, -6.0, 3.0, 0.0],
    [-3.0, 0.0, 3.0, 0.0],
    [1.0, 4.0, 1.0, 0.0],
]) / 6.0


class TrajectoryDomainError(ValueError):
    """Evaluation time outside the spline's supported interval."""


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass
class AgentState:
    """Pose of the tracked vehicle: world position plus yaw in (-pi, pi]."""

    position: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.position)) or not math.isfinite(self.yaw):
            raise ValueError("agent state must be finite")
        self.yaw = wrap_angle(float(self.yaw))


@dataclass
class UniformBSplineTrajectory:
    """Cubic spline over uniformly spaced control points.

    Control point i together with the next three supports the curve on the
    time span [t0 + i*delta_td, t0 + (i+1)*delta_td); the evaluable domain is
    [t0, t0 + (n_points - degree)*delta_td).
    """

    control_points: np.ndarray
    delta_td: float
    t0: float = 0.0
    degree: int = DEGREE

    def __post_init__(self):
        self.control_points = _as_points(self.control_points)
        if len(self.control_points) < self.degree + 1:
            raise ValueError(
                f"need at least {self.degree + 1} control points, "
                f"got {len(self.control_points)}"
            )
        if not self.delta_td > 0.0:
            raise ValueError("delta_td must be positive")

    @property
    def n_points(self) -> int:
        return len(self.control_points)

    @property
    def t_end(self) -> float:
        return self.t0 + (self.n_points - self.degree) * self.delta_td


@dataclass
class TrajectoryWindow:
    """A contiguous slice of control points.

    ``c_s``/``c_e`` index into the parent trajectory.  When ``prepended`` is
    set, ``points[0]`` is the current vehicle pose and ``points[1:]`` are the
    control points c_s..c_e.
    """

    points: np.ndarray
    c_s: int
    c_e: int
    t_n: float
    prepended: bool = False

    def __post_init__(self):
        self.points = _as_points(self.points)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def control_points(self) -> np.ndarray:
        """The slice of trajectory control points (pose excluded)."""
        return self.points[1:] if self.prepended else self.points


def make_uniform_bspline(control_points, delta_td: float,
                         t0: float = 0.0) -> UniformBSplineTrajectory:
    return UniformBSplineTrajectory(control_points, delta_td, t0)


def evaluate(traj: UniformBSplineTrajectory, t: float,
             derivative_order: int = 0) -> np.ndarray:
    """Evaluate position (order 0), velocity (1, m/s) or acceleration (2)."""
    if derivative_order not in (0, 1, 2):
        raise ValueError("derivative_order must be 0, 1 or 2")
    s = (t - traj.t0) / traj.delta_td
    n_spans = traj.n_points - traj.degree
    if s < 0.0 or s >= n_spans:
        raise TrajectoryDomainError(
            f"t={t} outside domain [{traj.t0}, {traj.t_end})"
        )
    i = min(int(s), n_spans - 1)
    u = s - i
    ctrl = traj.control_points[i:i + 4]
    if derivative_order == 0:
        w = np.array([u ** 3, u ** 2, u, 1.0]) @ _BASIS
        return w @ ctrl
    if derivative_order == 1:
        w = np.array([3.0 * u ** 2, 2.0 * u, 1.0, 0.0]) @ _BASIS
        return (w @ ctrl) / traj.delta_td
    w = np.array([6.0 * u, 2.0, 0.0, 0.0]) @ _BASIS
    return (w @ ctrl) / traj.delta_td ** 2


def window(traj: UniformBSplineTrajectory, t_n: float,
           length: int) -> TrajectoryWindow:
    """Slice out up to ``length`` control points starting at time t_n.

    Past the end of the trajectory the window clamps to the final control
    point(s) instead of erroring, so a tracker can run out the trajectory.
    """
    if t_n < traj.t0:
        raise ValueError(f"t_n={t_n} before trajectory start {traj.t0}")
    if length < 1:
        raise ValueError("window length must be >= 1")
    c_s = int(math.floor((t_n - traj.t0) / traj.delta_td))
    c_s = min(max(c_s, 0), traj.n_points - 1)
    c_e = min(c_s + length - 1, traj.n_points - 1)
    pts = traj.control_points[c_s:c_e + 1].copy()
    return TrajectoryWindow(points=pts, c_s=c_s, c_e=c_e, t_n=t_n)


def prepend_pose(win: TrajectoryWindow, q: AgentState) -> TrajectoryWindow:
    """Return a new window with the vehicle pose stitched on front."""
    if win.prepended:
        raise ValueError("window already carries a prepended pose")
    pts = np.vstack([q.position.reshape(1, 3), win.points])
    return replace(win, points=pts, prepended=True)


def save_trajectory_csv(traj: UniformBSplineTrajectory, path) -> None:
    """Write one `i,x,y,z` row per control point, parameters in the header."""
    with open(path, "w") as fh:
        fh.write(f"# delta_td={traj.delta_td:.17g} t0={traj.t0:.17g} "
                 f"degree={traj.degree}\n")
        for i, p in enumerate(traj.control_points):
            fh.write(f"{i},{p[0]:.17g},{p[1]:.17g},{p[2]:.17g}\n")


def load_trajectory_csv(path) -> UniformBSplineTrajectory:
    delta_td = t0 = None
    pts = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "delta_td":
                        delta_td = float(val)
                    elif key == "t0":
                        t0 = float(val)
                continue
            _, x, y, z = line.split(",")
            pts.append([float(x), float(y), float(z)])
    if delta_td is None or t0 is None:
        raise ValueError(f"{path}: missing delta_td/t0 header")
    return UniformBSplineTrajectory(np.array(pts), delta_td, t0)
