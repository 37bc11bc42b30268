import math

import numpy as np
import pytest
from scipy.optimize import brentq

from pcdplan.collision import GaussianSphere
from pcdplan.estimation import BeliefState
from pcdplan.planner import (
    ChanceModel,
    Objective,
    PlannerSettings,
    StaticWorld,
    Trajectory,
    chance_constraint_cost,
    extend_duration,
    initialize_trajectory,
    optimize,
    plan_step,
    precondition,
    smoothness_cost,
    static_cost,
)
from pcdplan.robot import JointSpec, LinkSpec, RobotModel, translation, workspace_length

Z, Y, X = (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0)


def yaw_pitch_arm(pitch_limit=math.pi, length=0.6, radius=0.08, spheres=4):
    joints = [JointSpec(Z, translation(), (-math.pi, math.pi)), JointSpec(Y, translation(), (-pitch_limit, pitch_limit))]
    return RobotModel(joints, [LinkSpec(1, length, spheres, radius, X)])


def planar_chain(dof=3):
    joints = [JointSpec(Z, translation(0.0 if i == 0 else 0.3, 0, 0)) for i in range(dof)]
    return RobotModel(joints, [LinkSpec(i, 0.3, 2, 0.1, X) for i in range(dof)])


def belief(mean, cov, radius=0.1, t=0.0):
    return BeliefState(t, (GaussianSphere.from_moments(mean, cov, radius),), (0,))


class ScriptedObstacle:
    """Stands in for the tracker: exact beliefs of one Gaussian sphere on a known path."""

    def __init__(self, mean_at, cov, radius):
        self.mean_at, self.cov, self.radius = mean_at, cov, radius
        self.now = 0.0

    def belief_at(self, t):
        return belief(self.mean_at(t), self.cov, self.radius, t)

    def predict(self, dt, steps):
        return [self.belief_at(self.now + s * dt) for s in range(1, steps + 1)]


def run_replanning(traj, obstacle, world, robot, settings, max_steps=80):
    """Drive plan_step as the simulator does, committing m keyframes per step."""
    m = settings.steps_per_plan
    k, diags = 0, []
    while k < traj.n and len(diags) < max_steps:
        obstacle.now = traj.t0 + k * traj.dt
        traj, diag = plan_step(traj, None, obstacle, world, robot, settings, k)
        diags.append(diag)
        k = min(k + m, traj.n) if k > 0 else m
    return traj, diags


# --------------------------------------------------------------------------- initialization and smoothness


def test_initialize_examples():
    t = initialize_trajectory([0.0], [1.0], 4, 0.1)
    assert np.allclose(t.q[:, 0], [0, 0.25, 0.5, 0.75, 1.0])
    assert t.duration == pytest.approx(0.4) and t.frozen == 0
    same = initialize_trajectory([0.3, -0.2], [0.3, -0.2], 6, 0.1)
    assert np.allclose(same.q, [0.3, -0.2])
    with pytest.raises(ValueError):
        initialize_trajectory([0.0], [1.0], 1, 0.1)


def test_initializer_beats_random_perturbations(rng):
    for n in (2, 5, 17, 50):
        t = initialize_trajectory(rng.normal(size=3), rng.normal(size=3), n, 0.1)
        best = smoothness_cost(t)[0]
        noise = rng.normal(scale=0.05, size=(10_000 // 4, n - 1, 3))
        for eps in noise:
            q = t.q.copy()
            q[1:-1] += eps
            assert smoothness_cost(q)[0] >= best


def test_smoothness_examples(rng):
    t = initialize_trajectory([0.0], [2.0], 10, 0.1)
    c, g = smoothness_cost(t)
    assert c == pytest.approx(0.0, abs=1e-24) and np.allclose(g, 0.0, atol=1e-12)
    q = np.zeros((7, 1))
    q[3] = 0.2
    assert smoothness_cost(q)[0] == pytest.approx(6 * 0.04)


def central_difference(f, x, h):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_smoothness_gradient(rng):
    q = rng.normal(size=(9, 4))
    assert rel_err(smoothness_cost(q)[1], central_difference(lambda x: smoothness_cost(x)[0], q, 1e-5)) < 1e-6


# --------------------------------------------------------------------------- static cost


def test_static_cost_values():
    arm = RobotModel([JointSpec(Z)], [LinkSpec(0, 0.0, 1, 0.125, X)])
    assert static_cost(np.zeros((3, 1)), StaticWorld(), arm) == (0.0, pytest.approx(np.zeros((3, 1))))
    # binary-exact sizes: the sphere sits exactly clearance + radius from the obstacle surface
    world = StaticWorld([[0.125 + 0.0625 + 0.25, 0, 0]], [0.25])
    c, g = static_cost(np.zeros((1, 1)), world, arm, 0.0625)
    assert c == 0.0 and np.all(g == 0.0)
    closer = StaticWorld([[0.375, 0, 0]], [0.25])
    assert static_cost(np.zeros((1, 1)), closer, arm, 0.0625)[0] == pytest.approx(0.0625**2)


def test_world_distance_signs():
    world = StaticWorld([[0, 0, 0]], [0.5], [[2, 0, 0]], [[0.5, 0.5, 0.5]])
    d, g = world.distance(np.array([[1.0, 0, 0], [2.0, 0, 0.2], [3.0, 0, 0]]))
    assert d[0, 0] == pytest.approx(0.5) and d[0, 1] == pytest.approx(0.5)
    assert d[1, 1] == pytest.approx(-0.3) and np.allclose(g[1, 1], [0, 0, 1])
    assert d[2, 1] == pytest.approx(0.5) and np.allclose(g[2, 1], [1, 0, 0])
    with pytest.raises(ValueError):
        StaticWorld([[0, 0, 0]], [-1.0])


def test_static_gradient_matches_finite_differences(rng):
    robot = planar_chain()
    world = StaticWorld([[0.5, 0.3, 0.0], [0.2, -0.4, 0.05]], [0.15, 0.2], [[0.7, 0.0, 0.0]], [[0.1, 0.2, 0.3]])
    checked = 0
    for _ in range(50):
        q = rng.uniform(-1.5, 1.5, size=(4, 3))
        c, g = static_cost(q, world, robot)
        if c == 0.0:
            continue
        fd = central_difference(lambda x: static_cost(x, world, robot)[0], q, 1e-6)
        if rel_err(g, fd) < 1e-5:
            checked += 1
        else:
            # tolerate only configurations sitting on a hinge or box-face kink
            h = 1e-6
            c_plus = static_cost(q + h, world, robot)[0]
            assert abs(c_plus - c) < 1e-3
    assert checked >= 20


# --------------------------------------------------------------------------- chance constraint


def test_far_obstacles_are_free():
    robot = yaw_pitch_arm()
    traj = initialize_trajectory([-1, 0], [1, 0], 10, 0.1)
    beliefs = {i: belief([10, 0, 0], 0.01 * np.eye(3)) for i in range(1, 11)}
    cost, probs, feas = chance_constraint_cost(traj, beliefs, robot, 0.99)
    assert cost == 0.0 and all(feas.values()) and max(probs.values()) < 1e-100


def test_cost_is_excess_probability():
    robot = RobotModel([JointSpec(Z)], [LinkSpec(0, 0.0, 1, 0.1, X)])
    traj = Trajectory(np.zeros((2, 1)), 0.1)
    cov = 0.01 * np.eye(3)

    def p_at(x):
        return chance_constraint_cost(traj, {1: belief([x, 0, 0], cov)}, robot, 0.95)[1][1]

    x = brentq(lambda x: p_at(x) - 0.10, 0.2, 2.0, xtol=1e-14)
    cost, probs, feas = chance_constraint_cost(traj, {1: belief([x, 0, 0], cov)}, robot, 0.95)
    assert probs[1] == pytest.approx(0.10, abs=1e-9)
    assert cost == pytest.approx(0.05, abs=1e-9)
    assert feas == {1: False}
    with pytest.raises(KeyError):
        chance_constraint_cost(traj, {1: belief([x, 0, 0], cov)}, robot, 0.95, window=[0, 1])


def near_beliefs(rng, n_frames):
    return {
        i: BeliefState(
            0.1 * i,
            (
                GaussianSphere.from_moments(rng.uniform(-0.5, 0.5, 3) * [1, 1, 0.2] + [0.3, 0, 0], 0.003 * np.eye(3) + 0.002 * np.diag(rng.random(3)), 0.1),
                GaussianSphere.from_moments(rng.uniform(-0.5, 0.5, 3) * [1, 1, 0.2], 0.004 * np.eye(3), 0.08),
            ),
            (0, 1),
        )
        for i in range(n_frames)
    }


@pytest.mark.parametrize("method", ["bound", "center", "enlarged"])
def test_penalty_gradient_matches_finite_differences(rng, method):
    robot = planar_chain()
    beliefs = near_beliefs(rng, 6)
    model = ChanceModel(robot, beliefs, method, 0.99, tol=1e-14)
    q = rng.uniform(-1.0, 1.0, size=(6, 3))
    idx = list(range(6))
    _, pen = model.evaluate(q, idx)
    g = model.penalty_gradient(q, idx)
    fd = model.penalty_gradient_fd(q, idx, h=1e-5)
    for i in np.flatnonzero(pen > 1e-3):
        assert rel_err(g[i], fd[i]) < 1e-5


def test_descent_direction_reduces_probability(rng):
    robot = yaw_pitch_arm()
    beliefs = {1: belief([0.85, 0.05, 0.05], 0.002 * np.eye(3))}
    model = ChanceModel(robot, beliefs, "bound", 0.99)
    q = np.array([[0.0, 0.0]])
    p0, pen0 = model.evaluate(q, [1])
    assert 0.01 <= p0[0] < 1.0
    g = model.penalty_gradient_fd(q, [1], h=1e-5)
    q1 = q - 0.05 * g / np.linalg.norm(g)
    p1, pen1 = model.evaluate(q1, [1])
    assert pen1[0] < pen0[0] and p1[0] < p0[0]


# --------------------------------------------------------------------------- optimizer


def test_preconditioner_inverts_metric(rng):
    g = rng.normal(size=(7, 2))
    a = 2 * np.eye(7) - np.eye(7, k=1) - np.eye(7, k=-1)
    assert np.allclose(a @ precondition(g), g)


def test_straight_line_is_left_alone():
    robot = yaw_pitch_arm()
    traj = initialize_trajectory([-1, 0.2], [1, -0.1], 12, 0.1)
    out, info = optimize(traj, None, StaticWorld(), robot, PlannerSettings())
    assert np.allclose(out.q, traj.q, atol=1e-12)
    assert info.reason == "gradient tolerance"


def test_static_obstacle_forces_detour():
    robot = yaw_pitch_arm(length=1.0, radius=0.15)
    world = StaticWorld([[0.9, 0.0, -0.05]], [0.1])
    traj = initialize_trajectory([-1.0, 0.0], [1.0, 0.0], 20, 0.1)
    settings = PlannerSettings(max_iter=300)
    assert static_cost(traj.q, world, robot, settings.clearance)[0] > 0
    out, info = optimize(traj, None, world, robot, settings)
    # The squared hinge is a penalty, so smoothness keeps the arm a hair inside
    # the clearance band at equilibrium; the obstacle itself is never touched.
    assert static_cost(out.q, world, robot, settings.clearance)[0] < 1e-5
    d, _ = world.distance(robot.sphere_centers(out.q))
    assert np.min(d[..., 0] - robot.sphere_radii) > 0.5 * settings.clearance
    assert smoothness_cost(out)[0] > smoothness_cost(traj)[0]
    assert np.array_equal(out.q[[0, -1]], traj.q[[0, -1]])


def test_optimizer_never_increases_cost(rng):
    robot = planar_chain()
    for scene in range(100):
        n = int(rng.integers(4, 12))
        traj = initialize_trajectory(rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3), n, 0.1)
        traj = traj.with_q(traj.q + np.r_[[0], rng.normal(scale=0.1, size=n - 1), [0]][:, None] * rng.normal(size=3))
        world = StaticWorld(rng.uniform(-0.8, 0.8, (2, 3)) * [1, 1, 0], rng.uniform(0.05, 0.2, 2))
        beliefs = near_beliefs(rng, n + 1)
        window = list(range(1, n))
        settings = PlannerSettings(max_iter=8, step_size=float(rng.choice([1e-3, 0.02, 0.2])))
        out, info = optimize(traj, beliefs, world, robot, settings, window)
        assert all(b <= a for a, b in zip(info.costs, info.costs[1:]))
        obj = Objective(robot, world, settings, ChanceModel(robot, beliefs, "bound", 0.99), window, np.arange(1, n))
        assert obj.value(out.q) <= obj.value(traj.q)
        assert robot.within_limits(out.q)


def test_frozen_prefix_is_kept(rng):
    robot = yaw_pitch_arm(length=1.0, radius=0.15)
    world = StaticWorld([[0.9, 0.0, -0.05]], [0.1])
    traj = initialize_trajectory([-1.0, 0.0], [1.0, 0.0], 20, 0.1)
    traj = Trajectory(traj.q, traj.dt, frozen=6)
    out, _ = optimize(traj, None, world, robot, PlannerSettings(max_iter=20))
    assert np.array_equal(out.q[:7], traj.q[:7])


# --------------------------------------------------------------------------- duration extension


def on_polyline(points, path, tol=1e-12):
    for p in points:
        best = np.inf
        for a, b in zip(path[:-1], path[1:]):
            ab = b - a
            s = 0.0 if not np.any(ab) else np.clip((p - a) @ ab / (ab @ ab), 0, 1)
            best = min(best, np.linalg.norm(a + s * ab - p))
        if best > tol:
            return False
    return True


def test_extend_duration_is_time_reparameterization(rng):
    q = np.cumsum(rng.normal(size=(11, 3)), axis=0)
    traj = Trajectory(q, 0.1, frozen=2)
    out = extend_duration(traj, 7)
    assert len(out.q) == len(q) + 1
    assert out.duration == pytest.approx(traj.duration + 0.1)
    assert np.array_equal(out.q[:3], q[:3]) and np.array_equal(out.q[-4:], q[-4:])
    seg = out.q[2:8]
    assert np.allclose(seg[[0, -1]], q[[2, 6]])
    assert on_polyline(seg, q[2:7])
    # along a straight approach the stretched segment covers exactly the same points
    line = Trajectory(np.linspace([0, 0, 0], [1, 2, 3], 11), 0.1, frozen=2)
    stretched = extend_duration(line, 7)
    assert on_polyline(stretched.q[2:8], line.q[2:7]) and on_polyline(line.q[2:7], stretched.q[2:8])
    assert np.allclose(np.diff(stretched.q[2:8], axis=0), (line.q[6] - line.q[2]) / 5)
    # a one-keyframe segment becomes a wait
    waited = extend_duration(traj, 3)
    assert np.array_equal(waited.q[2], waited.q[3])
    with pytest.raises(ValueError):
        extend_duration(traj, 2)


# --------------------------------------------------------------------------- replanning


def test_plan_step_without_obstacles_is_a_no_op():
    robot = yaw_pitch_arm()
    traj = initialize_trajectory([-1, 0], [1, 0], 20, 0.1)
    out, diag = plan_step(traj, None, None, StaticWorld(), robot, PlannerSettings(), 0)
    assert np.allclose(out.q, traj.q, atol=1e-12)
    assert diag.feasible and diag.extensions == 0 and diag.window == list(range(1, 11))


def test_far_parallel_obstacle_changes_nothing():
    robot = yaw_pitch_arm()
    settings = PlannerSettings(max_iter=30)
    traj = initialize_trajectory([-1.2, 0], [1.2, 0], 20, 0.1)
    obstacle = ScriptedObstacle(lambda t: np.array([-1.0 + 0.5 * t, 3.0, 0.0]), 0.01 * np.eye(3), 0.15)
    out, diags = run_replanning(traj, obstacle, StaticWorld(), robot, settings)
    assert sum(d.extensions for d in diags) == 0
    assert all(d.feasible for d in diags)
    assert len(out.q) == len(traj.q)
    assert smoothness_cost(out)[0] < 1e-12


def sweeping_obstacle():
    """Sits on the goal approach until t = 2.5 s, then slides out of the way."""
    park = np.array([0.6 * math.cos(0.9), 0.6 * math.sin(0.9), 0.0])

    def mean_at(t):
        return park + np.array([0.0, 0.0, 3.0]) * max(0.0, t - 2.5)

    return ScriptedObstacle(mean_at, 0.0004 * np.eye(3), 0.1)


def test_sweeping_obstacle_causes_wait_then_resume():
    robot = yaw_pitch_arm(pitch_limit=0.05)
    settings = PlannerSettings(max_iter=30)
    traj = initialize_trajectory([-1.2, 0], [1.2, 0], 20, 0.1)
    obstacle = sweeping_obstacle()
    out, diags = run_replanning(traj, obstacle, StaticWorld(), robot, settings)
    ext = [d.extensions for d in diags]
    assert sum(ext) >= 1
    first = next(i for i, e in enumerate(ext) if e)
    assert any(e == 0 for e in ext[first + 1 :])
    assert out.duration > 2.5
    assert np.allclose(out.q[-1], [1.2, 0])
    for i, q in enumerate(out.q):
        b = obstacle.belief_at(out.t0 + i * out.dt)
        p, _ = ChanceModel(robot, {i: b}, "bound", 0.99).evaluate(q[None, :], [i])
        assert p[0] < settings.threshold


def test_higher_confidence_never_shortens_path():
    robot = yaw_pitch_arm()
    obstacle = ScriptedObstacle(lambda t: np.array([0.55, 0.05, 0.12]), 0.003 * np.eye(3), 0.08)
    lengths = []
    for conf in (0.95, 0.99):
        settings = PlannerSettings(confidence=conf, max_iter=40)
        traj = initialize_trajectory([-1.2, 0], [1.2, 0], 20, 0.1)
        out, diags = run_replanning(traj, obstacle, StaticWorld(), robot, settings)
        lengths.append(workspace_length(robot, out.q))
    assert lengths[1] >= lengths[0]


def test_settings_validation():
    with pytest.raises(ValueError):
        PlannerSettings(confidence=1.0)
    with pytest.raises(ValueError):
        PlannerSettings(method="exact")
    assert PlannerSettings(steps_per_plan=4, keyframe_dt=0.05).planning_dt == pytest.approx(0.2)
