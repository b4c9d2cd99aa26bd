"""NMPC tracking of the refined window.

The model is a world-frame velocity-controlled kinematic point with yaw:
state (px, py, pz, yaw), input (vx, vy, vz, omega_z).  The tracking problem
is transcribed by multiple shooting (states at every step are decision
variables tied by the linear step equalities); each SQP subproblem linearizes
the concave keep-out constraints D_z^2 - ||p - o||^2 <= 0, which is an inner
approximation, so every iterate is feasible and the iteration descends
without a trust region.  Subproblems are solved in the input space after
eliminating the shooting equalities exactly (null-space method) and states
are recovered by exact rollout, so dynamics defects vanish.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from cvxopt import matrix as _cvxmat
from cvxopt import solvers as _cvxsolvers
from scipy.linalg import cho_factor, cho_solve

from .core import AgentState, TrajectoryWindow, wrap_angle
from .solvers import _SOLVER_LOCK

_HEADING_EPS = 1e-6
_SLACK_PENALTY = 1e4
# Obstacles farther than d_z + this from an iterate position cannot become
# active within one SQP step (max reach is N_p * delta_tc * 2 v_max < 1 m).
_ACTIVATION_MARGIN = 1.0

OPTIMAL = "optimal"
MAX_ITERATIONS = "max_iterations"
RELAXED = "relaxed"


@dataclass
class NmpcState:
    position: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.yaw = float(self.yaw)
        if not (np.all(np.isfinite(self.position)) and math.isfinite(self.yaw)):
            raise ValueError("state must be finite")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, [self.yaw]])


@dataclass
class ControlCommand:
    v: np.ndarray
    omega_z: float = 0.0

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.omega_z = float(self.omega_z)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.v, [self.omega_z]])


@dataclass
class LocalConfig:
    n_p: int = 15
    delta_tc: float = 0.05
    delta_td: float = 0.05
    d_z: float = 0.8
    v_max: float = 0.6
    omega_max: float = 1.0
    q_pos: float = 100.0
    q_yaw: float = 1.0
    r_v: float = 1.0
    r_omega: float = 0.1
    pos_min: np.ndarray = None   # arena bounds; None means unbounded
    pos_max: np.ndarray = None
    max_obstacles: int = 10
    max_sqp_iter: int = 30


_DEGENERATE_OFFSET = np.array([1e-6, 0.0, 0.0])


@dataclass
class NmpcProblem:
    horizon: int
    reference: np.ndarray        # (N_p+1, 3) positions
    yaw_reference: np.ndarray    # (N_p+1,) unwrapped
    v_ref: np.ndarray            # (N_p, 3)
    obstacles: np.ndarray        # (K, 3)
    q_diag: np.ndarray           # (4,)
    r_diag: np.ndarray           # (4,)
    u_min: np.ndarray            # (4,)
    u_max: np.ndarray
    x_min: np.ndarray            # (4,) -inf allowed
    x_max: np.ndarray
    d_z: float
    delta_tc: float
    x0: np.ndarray               # (4,)
    max_sqp_iter: int = 30

    def __post_init__(self):
        if self.reference.shape != (self.horizon + 1, 3):
            raise ValueError("reference length must be horizon + 1")
        if np.any(self.q_diag < 0) or np.any(self.r_diag < 0):
            raise ValueError("weights must be nonnegative")


@dataclass
class NmpcSolution:
    inputs: np.ndarray           # (N_p, 4)
    states: np.ndarray           # (N_p+1, 4), yaw wrapped by rollout
    status: str
    cost: float
    kkt_residual: float = 0.0
    relaxed: bool = False
    iterations: int = 0

    def first_command(self) -> ControlCommand:
        u = self.inputs[0]
        return ControlCommand(u[:3], u[3])

    def commands(self) -> list:
        return [ControlCommand(u[:3], u[3]) for u in self.inputs]

    def state_list(self) -> list:
        return [NmpcState(x[:3], wrap_angle(float(x[3]))) for x in self.states]


def dynamics_step(x: NmpcState, u: ControlCommand,
                  delta_tc: float) -> NmpcState:
    """First-order hold: position += v*dt, yaw += omega*dt (wrapped)."""
    pos = x.position + u.v * delta_tc
    yaw = wrap_angle(x.yaw + u.omega_z * delta_tc)
    return NmpcState(pos, yaw)


def _rollout(x0: np.ndarray, inputs: np.ndarray, delta: float) -> np.ndarray:
    """Linear rollout without yaw wrapping (internal iterate states)."""
    states = np.empty((len(inputs) + 1, 4))
    states[0] = x0
    np.cumsum(inputs * delta, axis=0, out=states[1:])
    states[1:] += x0
    return states


def build_nmpc(win: TrajectoryWindow, x0: AgentState, obstacles,
               cfg: LocalConfig) -> NmpcProblem:
    """Assemble the tracking problem from a (pose-prepended) window.

    Short windows are padded by repeating the terminal point; the velocity
    reference is the control-point difference over delta_td and the yaw
    reference follows its heading, held through near-zero segments and
    unwrapped against the current yaw.
    """
    n_p = cfg.n_p
    pts = win.points
    if len(pts) < n_p + 1:
        pad = np.repeat(pts[-1:], n_p + 1 - len(pts), axis=0)
        pts = np.vstack([pts, pad])
    else:
        pts = pts[:n_p + 1]
    ref = pts.astype(float)

    v_ref = (ref[1:] - ref[:-1]) / cfg.delta_td

    yaw_ref = np.empty(n_p + 1)
    prev = x0.yaw
    for k in range(n_p):
        v = v_ref[k]
        if np.linalg.norm(v[:2]) >= _HEADING_EPS:
            prev = math.atan2(v[1], v[0])
        yaw_ref[k] = prev
    yaw_ref[n_p] = prev
    # Unwrap so the quadratic yaw cost never sees a 2*pi seam.
    unwrapped = np.empty_like(yaw_ref)
    anchor = x0.yaw
    for k in range(n_p + 1):
        anchor = anchor + wrap_angle(yaw_ref[k] - anchor)
        unwrapped[k] = anchor

    obs = np.asarray(obstacles, dtype=float).reshape(-1, 3)
    if len(obs) > cfg.max_obstacles:
        obs = obs[:cfg.max_obstacles]

    u_lim = np.array([cfg.v_max, cfg.v_max, cfg.v_max, cfg.omega_max])
    x_min = np.full(4, -np.inf)
    x_max = np.full(4, np.inf)
    if cfg.pos_min is not None:
        x_min[:3] = np.asarray(cfg.pos_min, dtype=float)
    if cfg.pos_max is not None:
        x_max[:3] = np.asarray(cfg.pos_max, dtype=float)

    return NmpcProblem(
        horizon=n_p, reference=ref, yaw_reference=unwrapped, v_ref=v_ref,
        obstacles=obs,
        q_diag=np.array([cfg.q_pos, cfg.q_pos, cfg.q_pos, cfg.q_yaw]),
        r_diag=np.array([cfg.r_v, cfg.r_v, cfg.r_v, cfg.r_omega]),
        u_min=-u_lim, u_max=u_lim, x_min=x_min, x_max=x_max,
        d_z=cfg.d_z, delta_tc=cfg.delta_tc,
        x0=np.concatenate([x0.position, [x0.yaw]]),
        max_sqp_iter=cfg.max_sqp_iter)


_hessian_cache = {}


def _reduced_hessian(n_p: int, delta: float, q_diag, r_diag):
    """H and its Cholesky factor for the input-space QP, cached."""
    key = (n_p, delta, tuple(q_diag), tuple(r_diag))
    hit = _hessian_cache.get(key)
    if hit is not None:
        return hit
    nu = 4 * n_p
    # G maps stacked inputs to stacked states 0..N_p (state 0 has no inputs).
    G = np.zeros((4 * (n_p + 1), nu))
    for l in range(1, n_p + 1):
        G[4 * l:4 * l + 4, :4 * l] = np.tile(delta * np.eye(4), l)
    q_bar = np.tile(q_diag, n_p + 1)
    r_bar = np.tile(r_diag, n_p)
    H = G.T @ (q_bar[:, None] * G) + np.diag(r_bar)
    factor = cho_factor(H + 1e-12 * np.eye(nu))
    _hessian_cache[key] = (H, factor, G, q_bar, r_bar)
    return _hessian_cache[key]


def _reference_stacks(prob: NmpcProblem):
    x_ref = np.hstack([prob.reference, prob.yaw_reference[:, None]]).ravel()
    u_ref = np.hstack([prob.v_ref, np.zeros((prob.horizon, 1))]).ravel()
    return x_ref, u_ref


def _quad_cost(prob: NmpcProblem, inputs: np.ndarray,
               states: np.ndarray) -> float:
    x_ref, u_ref = _reference_stacks(prob)
    dx = states.ravel() - x_ref
    du = inputs.ravel() - u_ref
    q_bar = np.tile(prob.q_diag, prob.horizon + 1)
    r_bar = np.tile(prob.r_diag, prob.horizon)
    return float(dx @ (q_bar * dx) + du @ (r_bar * du))


def _obstacle_rows(prob: NmpcProblem, states: np.ndarray, G: np.ndarray):
    """Linearized keep-out rows in input space at the iterate states."""
    rows, rhs = [], []
    if len(prob.obstacles) == 0:
        return rows, rhs
    activation = prob.d_z + _ACTIVATION_MARGIN
    for l in range(1, prob.horizon + 1):
        p_bar = states[l, :3]
        d = np.linalg.norm(prob.obstacles - p_bar, axis=1)
        for k in np.flatnonzero(d < activation):
            o = prob.obstacles[k]
            if d[k] < 1e-12:
                # Linearization point must not coincide with the obstacle.
                p_lin = o + _DEGENERATE_OFFSET
            else:
                p_lin = p_bar
            nrm = float(np.linalg.norm(p_lin - o))
            a = 2.0 * (o - p_lin)
            # rows of G for the position components of state l
            g_rows = G[4 * l:4 * l + 3]
            rows.append(a @ g_rows)
            rhs.append(-prob.d_z ** 2 + nrm ** 2 + a @ p_lin
                       - a @ prob.x0[:3])
    return rows, rhs


def _state_box_rows(prob: NmpcProblem, G: np.ndarray):
    rows, rhs = [], []
    for l in range(1, prob.horizon + 1):
        for comp in range(4):
            g_row = G[4 * l + comp]
            if np.isfinite(prob.x_max[comp]):
                rows.append(g_row)
                rhs.append(prob.x_max[comp] - prob.x0[comp])
            if np.isfinite(prob.x_min[comp]):
                rows.append(-g_row)
                rhs.append(prob.x0[comp] - prob.x_min[comp])
    return rows, rhs


def _solve_qp(P, q, G_ineq, h_ineq):
    with _SOLVER_LOCK:
        saved = dict(_cvxsolvers.options)
        _cvxsolvers.options.update({
            "show_progress": False, "maxiters": 100,
            "abstol": 1e-10, "reltol": 1e-10, "feastol": 1e-9,
        })
        try:
            sol = _cvxsolvers.qp(_cvxmat(P), _cvxmat(q),
                                 _cvxmat(G_ineq), _cvxmat(h_ineq))
        finally:
            _cvxsolvers.options.clear()
            _cvxsolvers.options.update(saved)
    if sol["x"] is None:
        return None, float("inf")
    return np.asarray(sol["x"]).reshape(-1), float(sol.get("gap", 0.0))


def _sidestep_candidates(prob: NmpcProblem, u_box: np.ndarray):
    """Tracking inputs biased sideways around the straight-line heading.

    The linearized keep-out rows at a head-on iterate only generate
    stop/back-off steps; lateral seeds let the descent reach swerving
    optima.
    """
    v_ref4 = np.hstack([prob.v_ref, np.zeros((prob.horizon, 1))])
    track = np.clip(v_ref4.ravel(), -u_box, u_box)
    cands = [track]
    heading = prob.reference[-1] - prob.x0[:3]
    nrm = np.linalg.norm(heading[:2])
    if nrm > 1e-9:
        perp = np.array([-heading[1], heading[0], 0.0]) / nrm
    else:
        perp = np.array([0.0, 1.0, 0.0])
    v_scale = float(np.max(prob.u_max[:3]))
    for side in (1.0, -1.0):
        biased = v_ref4.copy()
        biased[:, :3] += 0.8 * v_scale * side * perp
        cands.append(np.clip(biased.ravel(), -u_box, u_box))
    return cands


def solve_nmpc(prob: NmpcProblem, warm: NmpcSolution = None) -> NmpcSolution:
    """Track the reference over the horizon; returns inputs and rolled states.

    With obstacles the descent is run from a few deterministic start
    iterates (shifted warm start, rest, tracking, lateral sidesteps) and the
    best result wins.  If the start pose is already inside the keep-out
    distance of an obstacle the constraints are relaxed with a heavily
    penalized slack and the solution is flagged ``relaxed``.
    """
    n_p = prob.horizon
    nu = 4 * n_p
    delta = prob.delta_tc
    H, factor, G, q_bar, r_bar = _reduced_hessian(
        n_p, delta, prob.q_diag, prob.r_diag)
    x_ref, u_ref = _reference_stacks(prob)
    x0_stack = np.tile(prob.x0, n_p + 1)
    q_lin = G.T @ (q_bar * (x0_stack - x_ref)) - r_bar * u_ref
    box_rows, box_rhs = _state_box_rows(prob, G)
    box_rows_arr = np.asarray(box_rows) if box_rows else None
    box_rhs_arr = np.asarray(box_rhs) if box_rows else None
    u_box = np.tile(prob.u_max, n_p)

    def clearance_ok(states):
        if len(prob.obstacles) == 0:
            return True
        pos = states[1:, :3]
        d = np.linalg.norm(pos[:, None, :] - prob.obstacles[None], axis=2)
        return bool((d >= prob.d_z).all())

    def boxes_ok(u, states):
        if box_rows_arr is not None:
            if np.any(box_rows_arr @ u > box_rhs_arr + 1e-9):
                return False
        return True

    def run_qp(states_bar, relax):
        obs_rows, obs_rhs = _obstacle_rows(prob, states_bar, G)
        n_obs = len(obs_rows)
        n_var = nu + (1 if relax else 0)
        blocks = [np.eye(nu), -np.eye(nu)]
        rhs = [u_box, u_box]
        if box_rows:
            blocks.append(box_rows_arr)
            rhs.append(box_rhs_arr)
        if n_obs:
            blocks.append(np.asarray(obs_rows))
            rhs.append(np.asarray(obs_rhs))
        G_ineq = np.vstack(blocks)
        h_ineq = np.concatenate(rhs)
        if relax:
            col = np.zeros((len(h_ineq), 1))
            if n_obs:
                col[-n_obs:, 0] = -1.0   # a.pos - s <= rhs
            G_ineq = np.hstack([G_ineq, col])
            G_ineq = np.vstack([G_ineq, np.zeros((1, n_var))])
            G_ineq[-1, -1] = -1.0        # s >= 0
            h_ineq = np.concatenate([h_ineq, [0.0]])
            P = np.zeros((n_var, n_var))
            P[:nu, :nu] = 2.0 * H
            P[-1, -1] = 1e-6
            q = np.concatenate([2.0 * q_lin, [_SLACK_PENALTY]])
        else:
            P = 2.0 * H
            q = 2.0 * q_lin
        u_new, gap = _solve_qp(P, q, G_ineq, h_ineq)
        if u_new is None:
            return None, 0.0, gap
        slack = float(u_new[-1]) if relax else 0.0
        return np.clip(u_new[:nu], -u_box, u_box), slack, gap

    def descend(u_start, relax, force_first=False):
        iterate = u_start
        states = _rollout(prob.x0, iterate.reshape(n_p, 4), delta)
        cost = _quad_cost(prob, iterate.reshape(n_p, 4), states)
        gap = 0.0
        slack = 0.0
        converged = False
        iterations = 0
        for iterations in range(1, max(1, prob.max_sqp_iter) + 1):
            u_new, slack, gap = run_qp(states, relax)
            if u_new is None:
                break
            new_states = _rollout(prob.x0, u_new.reshape(n_p, 4), delta)
            new_cost = _quad_cost(prob, u_new.reshape(n_p, 4), new_states)
            step = float(np.max(np.abs(u_new - iterate)))
            improved = new_cost < cost - 1e-12 * max(1.0, abs(cost))
            # From an infeasible seed the first step buys feasibility, not
            # cost; accept it unconditionally.
            if improved or ((relax or force_first) and iterations == 1):
                iterate, states, cost = u_new, new_states, new_cost
            if step < 1e-9 or not improved:
                converged = True
                break
        return iterate, states, cost, gap, slack, converged, iterations

    no_obstacles = len(prob.obstacles) == 0
    zeros = np.zeros(nu)
    relax = not clearance_ok(_rollout(prob.x0, zeros.reshape(n_p, 4), delta))

    converged = False
    gap = 0.0
    slack = 0.0
    iterations = 0
    iterate = zeros
    states = _rollout(prob.x0, zeros.reshape(n_p, 4), delta)
    best_cost = _quad_cost(prob, zeros.reshape(n_p, 4), states)

    if no_obstacles:
        # Common tracking case: the unconstrained minimizer, accepted when it
        # already satisfies every box; one QP otherwise.
        u_free = cho_solve(factor, -q_lin)
        ok = bool(np.all(np.abs(u_free) <= u_box + 1e-12))
        if ok and box_rows:
            ok = bool(np.all(box_rows_arr @ u_free <= box_rhs_arr + 1e-12))
        if ok:
            iterate = np.clip(u_free, -u_box, u_box)
            states = _rollout(prob.x0, iterate.reshape(n_p, 4), delta)
            best_cost = _quad_cost(prob, iterate.reshape(n_p, 4), states)
            converged = True
        else:
            iterate, states, best_cost, gap, slack, converged, iterations = \
                descend(zeros, False)
    elif relax:
        iterate, states, best_cost, gap, slack, converged, iterations = \
            descend(zeros, True)
    else:
        candidates = []
        if warm is not None and len(warm.inputs) == n_p:
            shifted = np.vstack([warm.inputs[1:], warm.inputs[-1:]])
            candidates.append(np.clip(shifted.ravel(), -u_box, u_box))
        candidates.append(zeros)
        candidates.extend(_sidestep_candidates(prob, u_box))
        runs = []
        for cand in candidates:
            cand_states = _rollout(prob.x0, cand.reshape(n_p, 4), delta)
            clean = clearance_ok(cand_states) and boxes_ok(cand, cand_states)
            res = descend(cand, False, force_first=not clean)
            final_states = res[1]
            if clearance_ok(final_states) and boxes_ok(res[0], final_states):
                runs.append(res)
        if not runs:
            runs.append(descend(zeros, False))
        best = min(range(len(runs)), key=lambda i: runs[i][2])
        iterate, states, best_cost, gap, slack, conv_i, iterations = runs[best]
        converged = conv_i

    inputs = np.clip(iterate.reshape(n_p, 4),
                     prob.u_min[None, :], prob.u_max[None, :])
    # Exact rollout with yaw wrapping: defects are identically zero.
    out_states = np.empty((n_p + 1, 4))
    out_states[0] = prob.x0
    state = NmpcState(prob.x0[:3], wrap_angle(float(prob.x0[3])))
    out_states[0, 3] = state.yaw
    for l in range(n_p):
        state = dynamics_step(state, ControlCommand(inputs[l, :3],
                                                    inputs[l, 3]), delta)
        out_states[l + 1] = state.as_vector()

    relaxed = relax and slack > 1e-7
    if relax:
        status = RELAXED if relaxed else (OPTIMAL if converged
                                          else MAX_ITERATIONS)
    else:
        status = OPTIMAL if converged else MAX_ITERATIONS
    return NmpcSolution(inputs=inputs, states=out_states, status=status,
                        cost=best_cost, kkt_residual=gap, relaxed=relaxed,
                        iterations=iterations)
