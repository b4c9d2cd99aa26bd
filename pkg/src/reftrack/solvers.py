"""Optimization engines: a second-order-cone solver and a box-constrained
quasi-Newton minimizer.

Both are thin, contract-enforcing fronts over mature engines (cvxopt's
interior-point conic solver, scipy's L-BFGS-B).  The fronts pin statuses,
tolerances and the invariants callers rely on: reported-optimal conic
solutions are verified feasible by direct substitution, and ``minimize_box``
never returns a point worse than its start.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from cvxopt import matrix as _cvxmat
from cvxopt import solvers as _cvxsolvers
from scipy.optimize import minimize as _scipy_minimize

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max_iterations"

CONVERGED = "converged"
CALLBACK_ERROR = "callback_error"

# cvxopt reads some options from module-global state; serialize calls.
_SOLVER_LOCK = threading.Lock()


@dataclass
class ConeConstraint:
    """One second-order cone row: ||E x + f||_2 <= g . x + h."""

    E: np.ndarray
    f: np.ndarray
    g: np.ndarray
    h: float = 0.0

    def __post_init__(self):
        self.E = np.atleast_2d(np.asarray(self.E, dtype=float))
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        self.h = float(self.h)
        if self.E.shape[0] != len(self.f):
            raise ValueError("cone E/f row mismatch")

    def residual(self, x: np.ndarray) -> float:
        """||E x + f|| - (g . x + h); positive means violated."""
        return float(np.linalg.norm(self.E @ x + self.f)
                     - (self.g @ x + self.h))


@dataclass
class ConicProgram:
    """min c.x  s.t.  A_lin x <= b_lin  and every cone constraint holds."""

    n: int
    c: np.ndarray
    A_lin: np.ndarray = None
    b_lin: np.ndarray = None
    cones: list = field(default_factory=list)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        if len(self.c) != self.n:
            raise ValueError("objective length != n")
        if self.A_lin is not None:
            self.A_lin = np.atleast_2d(np.asarray(self.A_lin, dtype=float))
            self.b_lin = np.asarray(self.b_lin, dtype=float).reshape(-1)
            if self.A_lin.shape != (len(self.b_lin), self.n):
                raise ValueError("A_lin/b_lin shape mismatch")
        for cone in self.cones:
            if cone.E.shape[1] != self.n or len(cone.g) != self.n:
                raise ValueError("cone dimension mismatch")
        if self.A_lin is None and not self.cones:
            raise ValueError("program needs at least one constraint")

    def max_violation(self, x: np.ndarray) -> float:
        worst = 0.0
        if self.A_lin is not None:
            worst = max(worst, float((self.A_lin @ x - self.b_lin).max()))
        for cone in self.cones:
            worst = max(worst, cone.residual(x))
        return worst


@dataclass
class ConicSolution:
    status: str
    x: np.ndarray
    objective: float
    max_violation: float


def solve_conic(prog: ConicProgram, feas_tol: float = 1e-8,
                rel_gap: float = 1e-6, max_iter: int = 100) -> ConicSolution:
    """Solve the cone program with a primal-dual interior-point method.

    OPTIMAL solutions are verified by substitution: if the worst constraint
    violation exceeds ``feas_tol`` the status is demoted to MAX_ITERATIONS.
    """
    Gl = hl = None
    if prog.A_lin is not None:
        Gl = _cvxmat(prog.A_lin)
        hl = _cvxmat(prog.b_lin)
    Gq, hq = [], []
    for cone in prog.cones:
        G = np.vstack([-cone.g.reshape(1, -1), -cone.E])
        h = np.concatenate([[cone.h], cone.f])
        Gq.append(_cvxmat(G))
        hq.append(_cvxmat(h))

    with _SOLVER_LOCK:
        saved = dict(_cvxsolvers.options)
        _cvxsolvers.options.update({
            "show_progress": False,
            "maxiters": int(max_iter),
            "abstol": rel_gap,
            "reltol": rel_gap,
            "feastol": feas_tol,
        })
        try:
            sol = _cvxsolvers.socp(_cvxmat(prog.c), Gl=Gl, hl=hl,
                                   Gq=Gq or None, hq=hq or None)
        finally:
            _cvxsolvers.options.clear()
            _cvxsolvers.options.update(saved)

    raw_status = sol["status"]
    if sol["x"] is None:
        return ConicSolution(INFEASIBLE, None, float("nan"), float("inf"))
    x = np.asarray(sol["x"]).reshape(-1)
    objective = float(prog.c @ x)
    violation = prog.max_violation(x)
    if raw_status == "optimal":
        status = OPTIMAL if violation <= feas_tol else MAX_ITERATIONS
    elif raw_status == "primal infeasible":
        status = INFEASIBLE
    else:
        # 'unknown' / 'dual infeasible': hand back the best iterate.
        status = MAX_ITERATIONS
    return ConicSolution(status, x, objective, violation)


def dump_conic_program(prog: ConicProgram) -> str:
    """Plain-text interchange dump for cross-checking with other solvers."""
    out = [f"conic-program n={prog.n}"]
    out.append("objective " + " ".join(f"{v:.17g}" for v in prog.c))
    m = 0 if prog.A_lin is None else len(prog.b_lin)
    out.append(f"linear-rows {m}")
    for i in range(m):
        coeffs = " ".join(f"{v:.17g}" for v in prog.A_lin[i])
        out.append(f"row {coeffs} <= {prog.b_lin[i]:.17g}")
    out.append(f"cones {len(prog.cones)}")
    for k, cone in enumerate(prog.cones):
        out.append(f"cone {k} rows={cone.E.shape[0]} h={cone.h:.17g}")
        out.append("  g " + " ".join(f"{v:.17g}" for v in cone.g))
        for r in range(cone.E.shape[0]):
            coeffs = " ".join(f"{v:.17g}" for v in cone.E[r])
            out.append(f"  e {coeffs} f {cone.f[r]:.17g}")
    return "\n".join(out) + "\n"


@dataclass
class BoxSpec:
    """Per-variable bounds; +-inf entries mean unbounded."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).reshape(-1)
        self.upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if self.lower.shape != self.upper.shape:
            raise ValueError("lower/upper length mismatch")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")


@dataclass
class BoxResult:
    x: np.ndarray
    fun: float
    status: str
    n_iter: int
    message: str = ""


class _Recorder:
    """Wraps the objective; tracks the best in-bounds point seen."""

    def __init__(self, fun, lower, upper):
        self.fun = fun
        self.lower = lower
        self.upper = upper
        self.best_x = None
        self.best_f = np.inf
        self.error = None

    def __call__(self, x):
        value, grad = self.fun(x)
        value = float(value)
        if np.isfinite(value) and value < self.best_f:
            if np.all(x >= self.lower - 1e-12) and np.all(x <= self.upper + 1e-12):
                self.best_f = value
                self.best_x = np.array(x)
        return value, np.asarray(grad, dtype=float)


def minimize_box(f, bounds: BoxSpec, x0, grad_tol: float = 1e-5,
                 f_tol: float = 1e-9, max_iter: int = 500,
                 memory: int = 8) -> BoxResult:
    """Limited-memory quasi-Newton descent inside a box.

    ``f`` must return ``(value, gradient)``.  The returned point is always in
    bounds and never worse than ``x0``; a callback that raises surfaces as
    status CALLBACK_ERROR with the best iterate seen so far.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != bounds.lower.shape:
        raise ValueError("x0 length does not match bounds")
    if np.any(x0 < bounds.lower - 1e-12) or np.any(x0 > bounds.upper + 1e-12):
        raise ValueError("x0 outside bounds")
    x0 = np.clip(x0, bounds.lower, bounds.upper)

    rec = _Recorder(f, bounds.lower, bounds.upper)
    scipy_bounds = list(zip(bounds.lower, bounds.upper))
    try:
        res = _scipy_minimize(
            rec, x0, jac=True, method="L-BFGS-B", bounds=scipy_bounds,
            options={"maxiter": int(max_iter), "maxfun": 50 * int(max_iter),
                     "ftol": f_tol, "gtol": grad_tol, "maxcor": int(memory)})
    except Exception as exc:  # objective callback failure
        if rec.best_x is None:
            raise
        return BoxResult(rec.best_x, rec.best_f, CALLBACK_ERROR, 0, str(exc))

    x_star = np.clip(np.asarray(res.x, dtype=float), bounds.lower, bounds.upper)
    f_star = float(res.fun)
    if rec.best_x is not None and rec.best_f < f_star:
        x_star, f_star = rec.best_x, rec.best_f
    status = CONVERGED if res.status == 0 else MAX_ITERATIONS
    if res.status not in (0, 1):
        status = MAX_ITERATIONS
    return BoxResult(x_star, f_star, status, int(res.nit), str(res.message))
