import json
import os

import numpy as np
import pytest

from reftrack.solvers import (CONVERGED, INFEASIBLE, MAX_ITERATIONS, OPTIMAL,
                              BoxSpec, ConeConstraint, ConicProgram,
                              dump_conic_program, minimize_box, solve_conic)

from oracles import (make_socp_instance, penalty_subgradient_socp_batch,
                     projected_gradient_descent)

DATA = os.path.join(os.path.dirname(__file__), "data", "frozen_oracles.json")


def _load_frozen():
    with open(DATA) as fh:
        return json.load(fh)


def socp_program(inst) -> ConicProgram:
    n = inst["n"]
    A = np.vstack([np.eye(n), -np.eye(n)])
    b = np.full(2 * n, inst["box"])
    cones = [ConeConstraint(E, f, g, h) for E, f, g, h in inst["cones"]]
    return ConicProgram(n, inst["c"], A, b, cones)


# -- solve_conic ---------------------------------------------------------------

def test_zero_distance_cone():
    # min t s.t. ||p - c|| <= t
    c = np.array([1.0, 2.0, 3.0])
    obj = np.array([0.0, 0.0, 0.0, 1.0])
    E = np.hstack([np.eye(3), np.zeros((3, 1))])
    g = np.array([0.0, 0.0, 0.0, 1.0])
    prog = ConicProgram(4, obj, cones=[ConeConstraint(E, -c, g)])
    sol = solve_conic(prog)
    assert sol.status == OPTIMAL
    assert abs(sol.objective) < 1e-7
    assert np.allclose(sol.x[:3], c, atol=1e-6)


def test_projection_identity():
    # min t s.t. ||p - c|| <= t, p in box not containing c
    c = np.array([2.0, -3.0, 0.5])
    lo, hi = np.zeros(3), np.ones(3)
    obj = np.array([0.0, 0.0, 0.0, 1.0])
    E = np.hstack([np.eye(3), np.zeros((3, 1))])
    g = np.array([0.0, 0.0, 0.0, 1.0])
    A = np.vstack([np.hstack([np.eye(3), np.zeros((3, 1))]),
                   np.hstack([-np.eye(3), np.zeros((3, 1))])])
    b = np.concatenate([hi, -lo])
    prog = ConicProgram(4, obj, A, b, [ConeConstraint(E, -c, g)])
    sol = solve_conic(prog)
    proj = np.clip(c, lo, hi)
    assert sol.status == OPTIMAL
    assert np.allclose(sol.x[:3], proj, atol=1e-6)
    assert sol.objective == pytest.approx(np.linalg.norm(proj - c), abs=1e-6)


def test_infeasible_program_detected():
    # x <= -1 and x >= 1
    prog = ConicProgram(1, np.array([1.0]),
                        np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))
    sol = solve_conic(prog)
    assert sol.status == INFEASIBLE


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        ConicProgram(2, np.array([1.0]))
    with pytest.raises(ValueError):
        ConicProgram(2, np.array([1.0, 0.0]), np.array([[1.0]]),
                     np.array([1.0]))
    with pytest.raises(ValueError):
        ConicProgram(2, np.array([1.0, 0.0]))


@pytest.mark.parametrize("seed", range(20))
def test_random_socps_match_frozen_subgradient_oracle(seed):
    frozen = _load_frozen()
    inst = make_socp_instance(seed)
    sol = solve_conic(socp_program(inst))
    assert sol.status == OPTIMAL
    assert sol.max_violation <= 1e-6
    assert abs(sol.objective - frozen["socp"][str(seed)]) < 1e-4


def test_live_subgradient_oracle_spot_check():
    # reduced-iteration live run documenting the frozen-value provenance
    inst = make_socp_instance(3)
    obj = penalty_subgradient_socp_batch([inst], iters=60_000)[0]
    sol = solve_conic(socp_program(inst))
    assert abs(sol.objective - obj) < 5e-4


def test_solve_conic_feasibility_by_substitution():
    rng = np.random.default_rng(77)
    for seed in range(5):
        inst = make_socp_instance(seed)
        prog = socp_program(inst)
        sol = solve_conic(prog)
        if sol.status == OPTIMAL:
            assert prog.max_violation(sol.x) <= 1e-8 + 1e-12
    _ = rng


def test_solve_conic_deterministic():
    inst = make_socp_instance(11)
    prog = socp_program(inst)
    a = solve_conic(prog)
    b = solve_conic(prog)
    assert np.array_equal(a.x, b.x)
    assert a.objective == b.objective


def test_program_dump_roundtrippable_text():
    inst = make_socp_instance(0)
    text = dump_conic_program(socp_program(inst))
    assert text.startswith("conic-program n=")
    assert "cones" in text and "objective" in text


# -- minimize_box ----------------------------------------------------------------

def _quad(center):
    def f(x):
        d = x - center
        return float(d @ d), 2.0 * d
    return f


def test_box_quadratic_interior():
    center = np.array([0.3, -0.2, 0.1])
    bounds = BoxSpec(-np.ones(3), np.ones(3))
    res = minimize_box(_quad(center), bounds, np.zeros(3))
    assert res.status == CONVERGED
    assert np.allclose(res.x, center, atol=1e-6)


def test_box_active_bounds():
    bounds = BoxSpec(np.ones(3), 2.0 * np.ones(3))
    res = minimize_box(_quad(np.zeros(3)), bounds, 1.5 * np.ones(3))
    assert np.allclose(res.x, np.ones(3), atol=1e-8)


def test_rosenbrock_matches_projected_gradient_oracle():
    def rosen(x):
        f = 100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
        g = np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]),
                      200 * (x[1] - x[0] ** 2)])
        return f, g

    bounds = BoxSpec(np.full(2, -5.0), np.full(2, 5.0))
    res = minimize_box(rosen, bounds, np.array([-1.2, 1.0]),
                       max_iter=2000)
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-4)
    x_pg, f_pg = projected_gradient_descent(rosen, bounds.lower,
                                            bounds.upper,
                                            np.array([-1.2, 1.0]),
                                            iters=100_000)
    assert np.allclose(res.x, x_pg, atol=1e-3)
    assert res.fun <= f_pg + 1e-8


def test_monotone_even_on_iteration_cap():
    def wiggly(x):
        f = float(np.sum(x ** 2) + 0.3 * np.sum(np.sin(5 * x)))
        g = 2.0 * x + 1.5 * np.cos(5 * x)
        return f, g

    rng = np.random.default_rng(0)
    x0 = rng.uniform(-2, 2, 8)
    bounds = BoxSpec(np.full(8, -2.0), np.full(8, 2.0))
    f0 = wiggly(x0)[0]
    res = minimize_box(wiggly, bounds, x0, max_iter=2)
    assert res.fun <= f0
    assert np.all(res.x >= bounds.lower) and np.all(res.x <= bounds.upper)


def test_callback_failure_surfaces_with_best_iterate():
    calls = {"n": 0}

    def flaky(x):
        calls["n"] += 1
        if calls["n"] > 3:
            raise RuntimeError("sensor dropout")
        return float(x @ x), 2.0 * x

    bounds = BoxSpec(np.full(2, -5.0), np.full(2, 5.0))
    res = minimize_box(flaky, bounds, np.array([1.0, 1.0]))
    assert res.status == "callback_error"
    assert np.all(np.isfinite(res.x))
    assert res.fun <= 2.0


def test_x0_out_of_bounds_rejected():
    bounds = BoxSpec(np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        minimize_box(_quad(np.zeros(2)), bounds, np.array([2.0, 0.5]))
    with pytest.raises(ValueError):
        BoxSpec(np.ones(2), np.zeros(2))


def test_minimize_box_deterministic():
    bounds = BoxSpec(np.full(4, -3.0), np.full(4, 3.0))
    rng = np.random.default_rng(5)
    x0 = rng.uniform(-1, 1, 4)
    r1 = minimize_box(_quad(np.array([0.5, -0.5, 1.0, 0.0])), bounds, x0)
    r2 = minimize_box(_quad(np.array([0.5, -0.5, 1.0, 0.0])), bounds, x0)
    assert np.array_equal(r1.x, r2.x) and r1.fun == r2.fun
