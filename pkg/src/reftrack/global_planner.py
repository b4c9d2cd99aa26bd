"""Global reference-trajectory refinement.

Each cycle: detect window segments that run too close to obstacles, build
free-space corridors around their free sub-chords, project the segment points
into the corridors with a small cone program, turn the projections into
per-point push directions, then minimize the weighted sum of smoothness,
obstacle and feasibility costs over the free control points under per-axis
box bounds.  If projection fails, a whole-window recovery program pushes
every point back into known free space.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import TrajectoryWindow
from .decomp import InfeasibleSegment, decompose_parallel
from .mapping import EdtMap, query_distances
from .solvers import (OPTIMAL, BoxSpec, ConeConstraint, ConicProgram,
                      minimize_box, solve_conic)

_INACTIVE_EPS = 1e-9
_COLLAPSE_EPS = 1e-3


class PushFailed(Exception):
    """Corridor projection failed; dead-zone recovery should run."""


class RecoveryFailed(Exception):
    """Whole-window recovery could not re-feasibilize the trajectory."""


@dataclass
class GlobalConfig:
    d_z: float = 0.8
    lambda_smooth: float = 0.2
    lambda_obs: float = 0.6
    lambda_feasibility: float = 0.2
    lambda1: float = 0.8
    lambda2: float = 0.8
    lambda3: float = 0.6
    v_max: np.ndarray = None
    a_max: np.ndarray = None
    delta_td: float = 0.05
    refine_length: int = 30
    fixed_ends: int = 3
    box_radius: float = None
    bbox_half: np.ndarray = None
    max_opt_iter: int = 100

    def __post_init__(self):
        self.v_max = np.full(3, 0.6) if self.v_max is None \
            else np.asarray(self.v_max, dtype=float) * np.ones(3)
        self.a_max = np.full(3, 1.0) if self.a_max is None \
            else np.asarray(self.a_max, dtype=float) * np.ones(3)
        if self.box_radius is None:
            self.box_radius = 2.0 * self.d_z
        self.bbox_half = np.array([2.0, 2.0, 1.0]) if self.bbox_half is None \
            else np.asarray(self.bbox_half, dtype=float).reshape(3)
        if self.d_z <= 0 or np.any(self.v_max <= 0) or np.any(self.a_max <= 0):
            raise ValueError("d_z, v_max, a_max must be positive")


@dataclass
class OccupiedSegment:
    """Maximal run of too-close window points plus one clear anchor each side."""

    start_idx: int
    end_idx: int
    points: np.ndarray


@dataclass
class ProjectedSegment:
    points: np.ndarray


@dataclass
class GradientInfo:
    """Per-window-point push targets: unit direction, distance, active flag."""

    c_star: np.ndarray
    grad: np.ndarray
    delta_d: np.ndarray
    active: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "GradientInfo":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros(n, dtype=bool))


@dataclass
class RefineResult:
    window: TrajectoryWindow
    status: str               # ok | recovered | failed
    timings: dict = field(default_factory=dict)
    n_segments: int = 0
    gradient_info: GradientInfo = None


def checking_occupied_segments(win: TrajectoryWindow, edt: EdtMap,
                               d_z: float) -> list:
    """Maximal runs of window points with clearance strictly below d_z,
    extended by one clear anchor point on each side where available."""
    pts = win.points
    if len(pts) == 0:
        raise ValueError("window is empty")
    occupied = query_distances(edt, pts) < d_z
    segments = []
    i = 0
    n = len(pts)
    while i < n:
        if not occupied[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and occupied[j + 1]:
            j += 1
        s = max(i - 1, 0)
        e = min(j + 1, n - 1)
        segments.append(OccupiedSegment(s, e, pts[s:e + 1].copy()))
        i = j + 1
    return segments


def free_subsegments(points: np.ndarray, edt: EdtMap):
    """Chords between consecutive points whose voxel is unoccupied.

    Returns (pairs, assignment): pairs are (i, j) index pairs into ``points``;
    assignment maps every point index to the chord interval containing it.
    """
    free = query_distances(edt, points) > 0.0
    idx = np.flatnonzero(free)
    if len(idx) < 2:
        raise PushFailed("fewer than two free points to anchor corridors")
    pairs = [(int(idx[k]), int(idx[k + 1])) for k in range(len(idx) - 1)]
    assignment = np.searchsorted(idx, np.arange(len(points)), side="right") - 1
    assignment = np.clip(assignment, 0, len(pairs) - 1)
    return pairs, assignment


def find_pushing_directions(seg: OccupiedSegment, polys: list,
                            assignment: np.ndarray,
                            cfg: GlobalConfig) -> ProjectedSegment:
    """Project the segment points into their corridors.

    Minimizes lambda1*t1 + lambda2*t2 + lambda3*t3 where t1/t2 bound the
    endpoint displacements and t3 bounds the total chain length of the
    projected polyline, subject to per-point corridor membership.
    """
    c = seg.points
    m = len(c)
    if m < 2:
        raise PushFailed("segment too short to project")
    n_links = m - 1
    nv = 3 * m + 3 + n_links
    it1, it2, it3 = 3 * m, 3 * m + 1, 3 * m + 2
    is0 = 3 * m + 3

    obj = np.zeros(nv)
    obj[it1], obj[it2], obj[it3] = cfg.lambda1, cfg.lambda2, cfg.lambda3

    rows_A, rows_b = [], []
    for j in range(m):
        poly = polys[int(assignment[j])]
        block = np.zeros((len(poly.b), nv))
        block[:, 3 * j:3 * j + 3] = poly.A
        rows_A.append(block)
        rows_b.append(poly.b)
    chain = np.zeros(nv)
    chain[is0:is0 + n_links] = 1.0
    chain[it3] = -1.0
    rows_A.append(chain.reshape(1, -1))
    rows_b.append(np.zeros(1))

    cones = []

    def point_selector(j):
        E = np.zeros((3, nv))
        E[:, 3 * j:3 * j + 3] = np.eye(3)
        return E

    g1 = np.zeros(nv); g1[it1] = 1.0
    cones.append(ConeConstraint(point_selector(0), -c[0], g1))
    g2 = np.zeros(nv); g2[it2] = 1.0
    cones.append(ConeConstraint(point_selector(m - 1), -c[m - 1], g2))
    for k in range(n_links):
        E = np.zeros((3, nv))
        E[:, 3 * (k + 1):3 * (k + 1) + 3] = np.eye(3)
        E[:, 3 * k:3 * k + 3] = -np.eye(3)
        gk = np.zeros(nv); gk[is0 + k] = 1.0
        cones.append(ConeConstraint(E, np.zeros(3), gk))

    prog = ConicProgram(nv, obj, np.vstack(rows_A), np.concatenate(rows_b),
                        cones)
    sol = solve_conic(prog, feas_tol=1e-8, rel_gap=1e-8)
    if sol.status != OPTIMAL:
        raise PushFailed(f"cone solve ended with status {sol.status}")
    p = sol.x[:3 * m].reshape(m, 3)

    if m > 2:
        d_start = np.linalg.norm(p[1:-1] - c[0], axis=1)
        d_end = np.linalg.norm(p[1:-1] - c[-1], axis=1)
        if np.all(np.minimum(d_start, d_end) <= _COLLAPSE_EPS):
            raise PushFailed("projected points collapsed onto segment ends")
    return ProjectedSegment(points=p)


def calculate_gradients(seg: OccupiedSegment,
                        proj: ProjectedSegment) -> GradientInfo:
    """Per-point push directions from the projected segment.

    For each interior point, walk along the projection until the chord
    direction flips sign against it, then intersect the crossed projection
    link with the plane through the point normal to the chord direction.
    End points and degenerate walks stay inactive.
    """
    c = seg.points
    p = proj.points
    if len(c) != len(p):
        raise ValueError("segment and projection length mismatch")
    m = len(c)
    info = GradientInfo.empty(m)
    if m < 3:
        return info
    n = m - 1
    for j in range(1, n):
        v1 = c[j + 1] - c[j - 1]
        k = n // 2
        val = float(v1 @ (p[k] - c[j]))
        lo = hi = None
        while True:
            # Step toward the along-track sign crossing: forward while the
            # probe point is behind the plane through c_j, backward when
            # ahead.
            k_next = k + 1 if val <= 0.0 else k - 1
            if k_next < 0 or k_next >= n:
                break
            val_next = float(v1 @ (p[k_next] - c[j]))
            if val_next * val <= 0.0:
                lo, hi = (k_next, k) if k_next < k else (k, k_next)
                break
            k, val = k_next, val_next
        if lo is None:
            continue
        denom = float(v1 @ (p[hi] - p[lo]))
        if abs(denom) < 1e-15:
            continue
        c_star = p[hi] + (p[hi] - p[lo]) * (float(v1 @ (c[j] - p[hi])) / denom)
        delta_d = float(np.linalg.norm(c_star - c[j]))
        if delta_d < _INACTIVE_EPS:
            continue
        info.c_star[j] = c_star
        info.grad[j] = (c_star - c[j]) / delta_d
        info.delta_d[j] = delta_d
        info.active[j] = True
    return info


def merge_gradient_info(window_len: int, segments: list,
                        infos: list) -> GradientInfo:
    merged = GradientInfo.empty(window_len)
    for seg, info in zip(segments, infos):
        sl = slice(seg.start_idx, seg.end_idx + 1)
        merged.c_star[sl] = info.c_star
        merged.grad[sl] = info.grad
        merged.delta_d[sl] = info.delta_d
        merged.active[sl] = info.active
    return merged


def cost_obstacle(points: np.ndarray, ginfo: GradientInfo,
                  cfg: GlobalConfig):
    """Hinged cubic penalty on clearance along the push direction.

    Only indices outside the fixed end blocks contribute; the push targets
    and directions are treated as constants of the current cycle.
    """
    n = len(points)
    grad = np.zeros((n, 3))
    lo, hi = cfg.fixed_ends, n - 1 - cfg.fixed_ends
    j_total = 0.0
    for i in np.flatnonzero(ginfo.active):
        if i < lo or i > hi:
            continue
        dis_e = cfg.d_z - float((points[i] - ginfo.c_star[i]) @ ginfo.grad[i])
        if dis_e > 0.0:
            j_total += dis_e ** 3
            grad[i] -= 3.0 * dis_e ** 2 * ginfo.grad[i]
    return j_total, grad


def cost_smooth(points: np.ndarray):
    """Sum of squared second differences with its exact gradient."""
    if len(points) < 3:
        raise ValueError("window must have at least 3 points")
    a = points[2:] - 2.0 * points[1:-1] + points[:-2]
    grad = np.zeros_like(points)
    grad[:-2] += 2.0 * a
    grad[1:-1] -= 4.0 * a
    grad[2:] += 2.0 * a
    return float((a * a).sum()), grad


def cost_feasibility(points: np.ndarray, cfg: GlobalConfig):
    """Quadratic penalty on velocity/acceleration excess over the limits.

    Differences of control points are compared against the limits converted
    to difference units (v_max*delta, a_max*delta^2); components within
    limits contribute nothing.
    """
    if len(points) < 3:
        raise ValueError("window must have at least 3 points")
    delta = cfg.delta_td
    v_lim = cfg.v_max * delta
    a_lim = cfg.a_max * delta * delta
    grad = np.zeros_like(points)

    v = points[1:] - points[:-1]
    e_v = np.where(v > v_lim, v - v_lim, np.where(v < -v_lim, v + v_lim, 0.0))
    j_total = float((e_v * e_v).sum()) / delta ** 2
    gv = 2.0 * e_v / delta ** 2
    grad[1:] += gv
    grad[:-1] -= gv

    a = points[2:] - 2.0 * points[1:-1] + points[:-2]
    e_a = np.where(a > a_lim, a - a_lim, np.where(a < -a_lim, a + a_lim, 0.0))
    j_total += float((e_a * e_a).sum())
    ga = 2.0 * e_a
    grad[:-2] += ga
    grad[1:-1] -= 2.0 * ga
    grad[2:] += ga
    return j_total, grad


def total_cost(points: np.ndarray, ginfo: GradientInfo, cfg: GlobalConfig):
    js, gs = cost_smooth(points)
    jo, go = cost_obstacle(points, ginfo, cfg)
    jf, gf = cost_feasibility(points, cfg)
    j = (cfg.lambda_smooth * js + cfg.lambda_obs * jo
         + cfg.lambda_feasibility * jf)
    g = (cfg.lambda_smooth * gs + cfg.lambda_obs * go
         + cfg.lambda_feasibility * gf)
    return j, g


def recover_onto_polyhedra(points: np.ndarray, polys: list,
                           assignment: np.ndarray):
    """Minimum-total-displacement push of each point into its polyhedron.

    Solves min sum_l q_l s.t. A_l (p_l + c_l) <= b_l, ||p_l|| <= q_l; the
    problem is separable per point, so the optimum equals the per-point
    Euclidean projection.  Returns (new_points, displacements).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m = len(pts)
    nv = 4 * m   # p (3m) then q (m)
    obj = np.zeros(nv)
    obj[3 * m:] = 1.0
    rows_A, rows_b = [], []
    cones = []
    for l in range(m):
        poly = polys[int(assignment[l])]
        block = np.zeros((len(poly.b), nv))
        block[:, 3 * l:3 * l + 3] = poly.A
        rows_A.append(block)
        rows_b.append(poly.b - poly.A @ pts[l])
        E = np.zeros((3, nv))
        E[:, 3 * l:3 * l + 3] = np.eye(3)
        g = np.zeros(nv); g[3 * m + l] = 1.0
        cones.append(ConeConstraint(E, np.zeros(3), g))
    prog = ConicProgram(nv, obj, np.vstack(rows_A), np.concatenate(rows_b),
                        cones)
    sol = solve_conic(prog, feas_tol=1e-8, rel_gap=1e-9)
    if sol.status != OPTIMAL:
        raise RecoveryFailed(f"recovery cone solve ended with {sol.status}")
    disp = sol.x[:3 * m].reshape(m, 3)
    return pts + disp, disp


def dead_zone_recover(win: TrajectoryWindow, edt: EdtMap,
                      cfg: GlobalConfig) -> TrajectoryWindow:
    """Push the whole window back into known free space.

    Corridors are decomposed over the window's free sub-chords; every point
    except the leading pose is displaced by the minimum total amount that
    puts it inside its corridor.
    """
    pts = win.points
    try:
        pairs, assignment = free_subsegments(pts, edt)
        segs = [(pts[i], pts[j]) for i, j in pairs]
        polys = decompose_parallel(segs, edt, cfg.bbox_half)
    except (PushFailed, InfeasibleSegment) as exc:
        raise RecoveryFailed(str(exc)) from exc
    moved, _ = recover_onto_polyhedra(pts[1:], polys, assignment[1:])
    new_pts = np.vstack([pts[:1], moved])
    return replace(win, points=new_pts)


def refine(win: TrajectoryWindow, edt: EdtMap, cfg: GlobalConfig,
           collect_debug: bool = False) -> RefineResult:
    """One global-planner cycle over a pose-prepended window.

    The first and last ``fixed_ends`` points are returned bit-identical; the
    rest are optimized inside per-coordinate boxes of half-width
    ``box_radius`` around their current values.
    """
    pts = win.points.copy()
    n = len(pts)
    timings = {"pushing": 0.0, "gradients": 0.0, "smoothing+feasibility": 0.0}
    d = cfg.fixed_ends
    if n < 2 * d + 1 or n < 3:
        return RefineResult(replace(win, points=pts), "ok", timings)

    status = "ok"
    ginfo = GradientInfo.empty(n)
    t0 = time.perf_counter()
    segments = checking_occupied_segments(win, edt, cfg.d_z)
    infos = []
    if segments:
        try:
            for seg in segments:
                pairs, assignment = free_subsegments(seg.points, edt)
                chords = [(seg.points[i], seg.points[j]) for i, j in pairs]
                polys = decompose_parallel(chords, edt, cfg.bbox_half)
                proj = find_pushing_directions(seg, polys, assignment, cfg)
                t1 = time.perf_counter()
                timings["pushing"] += t1 - t0
                infos.append(calculate_gradients(seg, proj))
                t0 = time.perf_counter()
                timings["gradients"] += t0 - t1
            ginfo = merge_gradient_info(n, segments, infos)
        except (PushFailed, InfeasibleSegment):
            try:
                recovered = dead_zone_recover(win, edt, cfg)
            except RecoveryFailed:
                timings["pushing"] += time.perf_counter() - t0
                return RefineResult(replace(win, points=win.points.copy()),
                                    "failed", timings, len(segments))
            new_pts = recovered.points.copy()
            # Refine never moves the anchored end blocks.
            new_pts[:d] = pts[:d]
            new_pts[n - d:] = pts[n - d:]
            pts = new_pts
            ginfo = GradientInfo.empty(n)
            status = "recovered"
            timings["pushing"] += time.perf_counter() - t0
            t0 = time.perf_counter()
    timings["pushing"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    free = slice(d, n - d)
    x0 = pts[free].ravel()
    bounds = BoxSpec(x0 - cfg.box_radius, x0 + cfg.box_radius)
    fixed = pts.copy()

    def objective(x):
        full = fixed.copy()
        full[free] = x.reshape(-1, 3)
        j, g = total_cost(full, ginfo, cfg)
        return j, g[free].ravel()

    res = minimize_box(objective, bounds, x0, grad_tol=1e-6, f_tol=1e-12,
                       max_iter=cfg.max_opt_iter)
    out = pts.copy()
    out[free] = res.x.reshape(-1, 3)
    timings["smoothing+feasibility"] += time.perf_counter() - t0

    result = RefineResult(replace(win, points=out), status, timings,
                          len(segments))
    if collect_debug:
        result.gradient_info = ginfo
    return result
