import numpy as np
import pytest

from reftrack.core import (AgentState, TrajectoryDomainError,
                           evaluate, load_trajectory_csv,
                           make_uniform_bspline, prepend_pose,
                           save_trajectory_csv, window, wrap_angle)

from oracles import bspline_oracle


def test_constant_spline_evaluates_to_point():
    p = np.array([1.0, 2.0, 3.0])
    traj = make_uniform_bspline(np.tile(p, (4, 1)), 0.05)
    for t in np.linspace(traj.t0, traj.t_end - 1e-9, 7):
        assert np.allclose(evaluate(traj, t, 0), p)


def test_default_knot_spacing_accepted():
    traj = make_uniform_bspline(np.zeros((5, 3)), 0.05)
    assert traj.delta_td == 0.05


def test_too_few_control_points_rejected():
    with pytest.raises(ValueError):
        make_uniform_bspline(np.zeros((3, 3)), 0.05)
    with pytest.raises(ValueError):
        make_uniform_bspline(np.zeros((5, 3)), 0.0)


def test_collinear_uniform_points_give_constant_velocity():
    delta = 0.05
    pts = np.array([[0.05 * i, 0.0, 0.0] for i in range(12)])
    traj = make_uniform_bspline(pts, delta)
    for t in np.linspace(traj.t0, traj.t_end - 1e-9, 9):
        assert np.allclose(evaluate(traj, t, 1), [1.0, 0.0, 0.0], atol=1e-12)
        assert np.allclose(evaluate(traj, t, 2), 0.0, atol=1e-9)


def test_evaluate_matches_de_boor_oracle():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(10, 3))
    delta, t0 = 0.05, 1.25
    traj = make_uniform_bspline(pts, delta, t0)
    ts = rng.uniform(traj.t0, traj.t_end - 1e-9, size=100)
    for order in (0, 1, 2):
        got = np.array([evaluate(traj, t, order) for t in ts])
        want = np.array([bspline_oracle(pts, delta, t0, t, order)
                         for t in ts])
        assert np.max(np.abs(got - want)) < 1e-12 * max(1.0, np.abs(want).max())


def test_evaluate_outside_domain_raises():
    traj = make_uniform_bspline(np.zeros((6, 3)), 0.1)
    with pytest.raises(TrajectoryDomainError):
        evaluate(traj, traj.t0 - 1e-6)
    with pytest.raises(TrajectoryDomainError):
        evaluate(traj, traj.t_end)


def test_spline_locality():
    # perturbing control point i changes the curve only on spans i-3..i
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(12, 3))
    traj = make_uniform_bspline(pts, 0.1)
    i = 6
    bumped = pts.copy()
    bumped[i] += 0.5
    traj2 = make_uniform_bspline(bumped, 0.1)
    for span in range(12 - 3):
        t = traj.t0 + (span + 0.5) * 0.1
        a, b = evaluate(traj, t), evaluate(traj2, t)
        touched = i - 3 <= span <= i
        if touched:
            assert not np.allclose(a, b)
        else:
            assert np.allclose(a, b)


def test_convex_hull_property():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(9, 3))
    traj = make_uniform_bspline(pts, 0.1)
    for t in rng.uniform(traj.t0, traj.t_end - 1e-9, size=50):
        s = (t - traj.t0) / traj.delta_td
        i = min(int(s), traj.n_points - 4)
        active = pts[i:i + 4]
        p = evaluate(traj, t)
        # inside the bounding box of the active hull (necessary condition,
        # exact hull membership holds for the convex basis weights)
        assert np.all(p >= active.min(axis=0) - 1e-12)
        assert np.all(p <= active.max(axis=0) + 1e-12)


def test_derivative_consistency_finite_difference():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(10, 3))
    traj = make_uniform_bspline(pts, 0.05)
    h = 1e-6
    for t in rng.uniform(traj.t0 + 1e-3, traj.t_end - 1e-3, size=20):
        fd = (evaluate(traj, t + h) - evaluate(traj, t - h)) / (2 * h)
        v = evaluate(traj, t, 1)
        assert np.linalg.norm(fd - v) <= 1e-6 * max(1.0, np.linalg.norm(v))


def test_window_start_and_index_arithmetic():
    pts = np.zeros((20, 3))
    traj = make_uniform_bspline(pts, 0.05, t0=2.0)
    w = window(traj, 2.0, 10)
    assert w.c_s == 0
    w = window(traj, 2.0 + 0.25, 10)
    assert (w.c_s, w.c_e) == (5, 14)
    assert len(w.points) == 10


def test_window_clamps_at_end():
    pts = np.arange(10).repeat(3).reshape(10, 3).astype(float)
    traj = make_uniform_bspline(pts, 0.05)
    w = window(traj, traj.t0 + 10.0, 8)
    assert w.c_s == 9 and w.c_e == 9
    assert len(w.points) == 1
    with pytest.raises(ValueError):
        window(traj, traj.t0 - 0.01, 5)


def test_window_copies_points():
    traj = make_uniform_bspline(np.zeros((8, 3)), 0.05)
    w = window(traj, 0.0, 4)
    w.points[0] = 99.0
    assert np.all(traj.control_points == 0.0)


def test_prepend_pose():
    traj = make_uniform_bspline(np.ones((6, 3)), 0.05)
    w = window(traj, 0.0, 3)
    q = AgentState([0.0, 0.0, 0.0], 0.3)
    w2 = prepend_pose(w, q)
    assert len(w2.points) == 4
    assert np.allclose(w2.points[0], 0.0)
    assert np.allclose(w2.points[1:], 1.0)
    assert w2.prepended and (w2.c_s, w2.c_e) == (w.c_s, w.c_e)
    assert np.allclose(w2.control_points, w.points)
    # duplicate leading point is allowed
    w3 = prepend_pose(window(traj, 0.0, 3), AgentState([1.0, 1.0, 1.0]))
    assert np.allclose(w3.points[0], w3.points[1])


def test_wrap_angle():
    assert wrap_angle(np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert wrap_angle(3 * np.pi / 2) == pytest.approx(-np.pi / 2)


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    traj = make_uniform_bspline(rng.normal(size=(7, 3)), 0.05, t0=0.5)
    path = tmp_path / "traj.csv"
    save_trajectory_csv(traj, path)
    back = load_trajectory_csv(path)
    assert back.delta_td == traj.delta_td and back.t0 == traj.t0
    assert np.array_equal(back.control_points, traj.control_points)
