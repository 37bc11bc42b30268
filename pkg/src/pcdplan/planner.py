"""Space-time trajectory optimization under per-keyframe collision chance constraints."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .collision import (
    DEFAULT_TOL,
    METHODS,
    aggregate,
    batch_scores,
    combine_independent,
)
from .estimation import BeliefState, PointCloud, Tracker
from .robot import RobotModel


@dataclass(frozen=True)
class Trajectory:
    """Keyframes ``q[0..n]`` at times ``t0 + i * dt``; keyframes ``<= frozen`` are committed."""

    q: np.ndarray
    dt: float
    frozen: int = 0
    t0: float = 0.0

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64)
        if q.ndim != 2 or len(q) < 2:
            raise ValueError("a trajectory needs at least two keyframes")
        if not self.dt > 0.0:
            raise ValueError("keyframe spacing must be positive")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "frozen", int(min(max(self.frozen, 0), len(q) - 1)))

    @property
    def n(self) -> int:
        """Index of the last keyframe (the goal)."""
        return len(self.q) - 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.q))

    @property
    def duration(self) -> float:
        return self.n * self.dt

    def with_q(self, q) -> "Trajectory":
        return replace(self, q=q)


@dataclass(frozen=True)
class PlannerSettings:
    confidence: float = 0.99
    keyframe_dt: float = 0.1
    steps_per_plan: int = 5
    max_iter: int = 100
    step_size: float = 0.05
    clearance: float = 0.02
    max_extensions: int = 10
    collision_weight: float = 1.0
    method: str = "bound"
    time_budget: float | None = None
    grad_tol: float = 1e-8
    max_halvings: int = 12

    def __post_init__(self):
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.steps_per_plan < 1:
            raise ValueError("steps_per_plan must be at least 1")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")

    @property
    def threshold(self) -> float:
        return 1.0 - self.confidence

    @property
    def planning_dt(self) -> float:
        return self.steps_per_plan * self.keyframe_dt


@dataclass(frozen=True)
class StaticWorld:
    """Known static geometry: spheres and axis-aligned boxes."""

    sphere_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sphere_radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    box_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    box_half_extents: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        for name in ("sphere_centers", "box_centers", "box_half_extents"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "sphere_radii", np.asarray(self.sphere_radii, dtype=np.float64).reshape(-1))
        if len(self.sphere_radii) != len(self.sphere_centers):
            raise ValueError("one radius per static sphere is required")
        if len(self.box_centers) != len(self.box_half_extents):
            raise ValueError("one half-extent triple per static box is required")
        if np.any(self.sphere_radii <= 0.0) or np.any(self.box_half_extents <= 0.0):
            raise ValueError("static geometry sizes must be positive")

    @property
    def empty(self) -> bool:
        return len(self.sphere_radii) == 0 and len(self.box_centers) == 0

    def distance(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Signed surface distance of points (..., 3) to every primitive and its gradient.

        Returns arrays of shape (..., S + B) and (..., S + B, 3).
        """
        x = np.asarray(x, dtype=np.float64)
        ds, gs = [], []
        if len(self.sphere_radii):
            v = x[..., None, :] - self.sphere_centers
            n = np.linalg.norm(v, axis=-1)
            safe = np.where(n > 0.0, n, 1.0)
            ds.append(n - self.sphere_radii)
            gs.append(np.where((n > 0.0)[..., None], v / safe[..., None], np.array([0.0, 0.0, 1.0])))
        if len(self.box_centers):
            v = x[..., None, :] - self.box_centers
            qd = np.abs(v) - self.box_half_extents
            outside = np.maximum(qd, 0.0)
            on = np.linalg.norm(outside, axis=-1)
            inside = np.minimum(np.max(qd, axis=-1), 0.0)
            ds.append(on + inside)
            sgn = np.where(v >= 0.0, 1.0, -1.0)
            g_out = sgn * outside / np.where(on > 0.0, on, 1.0)[..., None]
            axis = np.argmax(qd, axis=-1)
            g_in = sgn * (np.arange(3) == axis[..., None])
            gs.append(np.where((on > 0.0)[..., None], g_out, g_in))
        if not ds:
            shape = x.shape[:-1] + (0,)
            return np.zeros(shape), np.zeros(shape + (3,))
        return np.concatenate(ds, axis=-1), np.concatenate(gs, axis=-2)


# --------------------------------------------------------------------------- costs


def initialize_trajectory(q_s, q_g, n: int, dt: float) -> Trajectory:
    """Joint-space straight line; with pinned ends it is the minimizer of summed squared second differences."""
    if n < 2:
        raise ValueError("n must be at least 2")
    q_s = np.asarray(q_s, dtype=np.float64)
    q_g = np.asarray(q_g, dtype=np.float64)
    s = np.linspace(0.0, 1.0, n + 1)[:, None]
    return Trajectory((1.0 - s) * q_s + s * q_g, dt)


def second_differences(q: np.ndarray) -> np.ndarray:
    return q[:-2] - 2.0 * q[1:-1] + q[2:]


def smoothness_cost(q) -> tuple[float, np.ndarray]:
    """Sum of squared second differences over interior keyframes, and its gradient (n+1, D)."""
    q = np.asarray(q.q if isinstance(q, Trajectory) else q, dtype=np.float64)
    a = second_differences(q)
    grad = np.zeros_like(q)
    grad[:-2] += 2.0 * a
    grad[1:-1] -= 4.0 * a
    grad[2:] += 2.0 * a
    return float(np.sum(a * a)), grad


def _static_terms(centers, world: StaticWorld, radii, clearance: float):
    """Hinge values (K, N, P) and their gradients w.r.t. sphere centers."""
    d, g = world.distance(centers)
    h = np.maximum(0.0, clearance + radii[:, None] - d)
    return h, np.einsum("knp,knpi->kni", -2.0 * h, g)


def static_cost(q, world: StaticWorld, robot: RobotModel, clearance: float = 0.02) -> tuple[float, np.ndarray]:
    """Squared hinge on clearance violations of every robot sphere against every static primitive.

    ``q`` is (K, D); the gradient has the same shape.
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1, robot.dof)
    if world.empty or robot.n_spheres == 0:
        return 0.0, np.zeros_like(q)
    frames = robot.forward_kinematics(q)
    h, dc = _static_terms(robot.sphere_centers(q, frames), world, robot.sphere_radii, clearance)
    cost = float(np.sum(h * h))
    grad = np.zeros_like(q)
    if cost > 0.0:
        grad = np.einsum("kni,knid->kd", dc, robot.sphere_jacobians(q, frames))
    return cost, grad


class ChanceModel:
    """Collision probabilities of keyframes against predicted beliefs.

    ``beliefs`` maps keyframe index to the belief at that keyframe's time.
    """

    def __init__(
        self,
        robot: RobotModel,
        beliefs: Mapping[int, BeliefState],
        method: str,
        confidence: float,
        tol: float = DEFAULT_TOL,
    ):
        self.robot = robot
        self.tol = tol
        self.beliefs = dict(beliefs)
        self.method = method
        self.confidence = confidence
        self.threshold = 1.0 - confidence
        self.log_threshold = math.log(self.threshold)

    def _evaluate(self, q, idx, with_grad: bool, centers=None, jac=None):
        """Probabilities, penalties and (optionally) penalty gradients.

        ``centers`` and ``jac`` may be passed in when the caller has already
        run forward kinematics for ``q``.
        """
        q = np.asarray(q, dtype=np.float64).reshape(-1, self.robot.dof)
        idx = list(idx)
        if not idx or not self.beliefs:
            z = np.zeros(len(idx))
            return z, z, np.zeros_like(q)
        tables = [self.beliefs[i].table for i in idx]
        if centers is None:
            centers = self.robot.sphere_centers(q)
        sc = batch_scores(centers, self.robot.sphere_radii, tables, self.method, self.confidence, self.tol)
        groups = tables[0].group_starts
        links = self.robot.link_starts
        prob = combine_independent(aggregate(sc.probability, links, groups))
        inv_scale = 1.0 / np.sqrt(np.stack([t.evals[:, 0] for t in tables]))[:, None, :]
        surrogate = sc.log_score + sc.depth * inv_scale
        worst = aggregate(surrogate, links, groups)
        b, nj, nl = worst.shape
        flat = worst.reshape(b, -1)
        top = np.max(flat, axis=1, keepdims=True)
        expo = np.exp(flat - top)
        lse = top[:, 0] + np.log(np.sum(expo, axis=1))
        penalty = np.maximum(lse - self.log_threshold, 0.0)
        if not with_grad:
            return prob, penalty, None

        weight = (expo / np.sum(expo, axis=1, keepdims=True)).reshape(b, nj, nl)
        pair_grad = sc.grad + sc.depth_grad * inv_scale[..., None]
        center_grad = np.zeros((b, self.robot.n_spheres, 3))
        link_bounds = np.r_[links, self.robot.n_spheres]
        group_bounds = np.r_[groups, surrogate.shape[2]]
        rows = np.arange(b)
        for j in range(nj):
            n0, n1 = link_bounds[j], link_bounds[j + 1]
            for l in range(nl):
                g0, g1 = group_bounds[l], group_bounds[l + 1]
                block = surrogate[:, n0:n1, g0:g1].reshape(b, -1)
                arg = np.argmax(block, axis=1)
                ni = n0 + arg // (g1 - g0)
                qi = g0 + arg % (g1 - g0)
                center_grad[rows, ni] += weight[:, j, l, None] * pair_grad[rows, ni, qi]
        if jac is None:
            jac = self.robot.sphere_jacobians(q)
        grad = np.einsum("bni,bnid->bd", center_grad, jac)
        grad[penalty <= 0.0] = 0.0
        return prob, penalty, grad

    def evaluate(self, q: np.ndarray, idx: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Per-keyframe collision probability and chance penalty for configurations ``q[i]`` at keyframes ``idx[i]``.

        The probability aggregates pairs exactly as the link/obstacle
        independence model prescribes. The penalty is a smooth stand-in used
        for descent: the hinge, in log space, of the summed worst-pair scores
        above the threshold. That sum upper-bounds the probability, so a zero
        penalty implies a feasible keyframe. Pairs whose spheres already
        overlap the obstacle mean get an extra depth term, since the plain
        score is flat there.
        """
        prob, penalty, _ = self._evaluate(q, idx, False)
        return prob, penalty

    def penalty_gradient(self, q: np.ndarray, idx: Sequence[int]) -> np.ndarray:
        """Gradient of each keyframe's penalty w.r.t. its own configuration."""
        return self._evaluate(q, idx, True)[2]

    def penalty_gradient_fd(self, q: np.ndarray, idx: Sequence[int], h: float = 1e-6) -> np.ndarray:
        """Central differences of the penalty; a cross-check for ``penalty_gradient``."""
        q = np.asarray(q, dtype=np.float64).reshape(-1, self.robot.dof)
        k, d = q.shape
        eye = np.eye(d) * h
        plus = (q[:, None, :] + eye[None]).reshape(-1, d)
        minus = (q[:, None, :] - eye[None]).reshape(-1, d)
        rep = np.repeat(np.asarray(idx), d)
        _, fp = self.evaluate(np.vstack([plus, minus]), np.r_[rep, rep])
        return ((fp[: k * d] - fp[k * d :]) / (2.0 * h)).reshape(k, d)


def chance_constraint_cost(
    traj: Trajectory,
    beliefs: Mapping[int, BeliefState],
    robot: RobotModel,
    confidence: float,
    window: Sequence[int] | None = None,
    method: str = "bound",
) -> tuple[float, dict[int, float], dict[int, bool]]:
    """Summed hinge ``max(P_i - (1 - confidence), 0)`` over the window keyframes.

    Returns the cost, the probability of each keyframe and its feasibility
    (``P_i < 1 - confidence``).
    """
    idx = list(beliefs) if window is None else list(window)
    missing = [i for i in idx if i not in beliefs]
    if missing:
        raise KeyError(f"no belief for keyframes {missing}")
    idx = [i for i in idx if 0 <= i <= traj.n]
    model = ChanceModel(robot, beliefs, method, confidence)
    prob, _ = model.evaluate(traj.q[idx], idx)
    thr = 1.0 - confidence
    cost = float(np.sum(np.maximum(prob - thr, 0.0)))
    probs = {i: float(p) for i, p in zip(idx, prob)}
    return cost, probs, {i: p < thr for i, p in probs.items()}


# --------------------------------------------------------------------------- optimizer


@lru_cache(maxsize=64)
def _metric_factor(size: int) -> np.ndarray:
    """Banded Cholesky factor of the pinned-end first-difference metric tridiag(-1, 2, -1)."""
    ab = np.zeros((2, size))
    ab[0, 1:] = -1.0
    ab[1, :] = 2.0
    return cholesky_banded(ab)


def precondition(grad: np.ndarray) -> np.ndarray:
    if len(grad) == 0:
        return grad
    return cho_solve_banded((_metric_factor(len(grad)), False), grad)


@dataclass
class OptimizeInfo:
    costs: list = field(default_factory=list)
    iterations: int = 0
    accepted: int = 0
    reason: str = ""


class Objective:
    """Cost of the free keyframes: smoothness, static clearance and the weighted chance penalty on the window."""

    def __init__(self, robot, world, settings: PlannerSettings, chance: ChanceModel | None, window, free):
        self.robot = robot
        self.world = world
        self.settings = settings
        self.chance = chance
        self.free = np.asarray(free)
        lo, hi = self.free[0], self.free[-1]
        self.window = [i for i in window if lo <= i <= hi] if chance is not None else []
        self.window_rows = np.asarray(self.window, dtype=np.intp) - lo

    def _terms(self, q: np.ndarray, with_grad: bool):
        rows = q[self.free]
        frames = self.robot.forward_kinematics(rows)
        centers = self.robot.sphere_centers(rows, frames)
        jac = self.robot.sphere_jacobians(rows, frames) if with_grad else None
        f, g_s = smoothness_cost(q)
        grad = g_s[self.free] if with_grad else None
        if not self.world.empty:
            h, dc = _static_terms(centers, self.world, self.robot.sphere_radii, self.settings.clearance)
            f += float(np.sum(h * h))
            if with_grad:
                grad += np.einsum("kni,knid->kd", dc, jac)
        if self.window:
            w = self.window_rows
            _, pen, g_c = self.chance._evaluate(
                rows[w], self.window, with_grad, centers[w], None if jac is None else jac[w]
            )
            f += self.settings.collision_weight * float(np.sum(pen))
            if with_grad:
                grad[w] += self.settings.collision_weight * g_c
        return f, grad

    def value(self, q: np.ndarray) -> float:
        return self._terms(q, False)[0]

    def value_and_gradient(self, q: np.ndarray) -> tuple[float, np.ndarray]:
        return self._terms(q, True)


def optimize(
    traj: Trajectory,
    beliefs: Mapping[int, BeliefState] | None,
    world: StaticWorld,
    robot: RobotModel,
    settings: PlannerSettings,
    window: Sequence[int] | None = None,
) -> tuple[Trajectory, OptimizeInfo]:
    """Preconditioned descent on the free keyframes (after ``frozen``, before the goal).

    Each step is ``-step_size * A^-1 grad`` with ``A`` the first-difference
    metric, rescaled so no joint moves more than ``step_size`` radians in one
    iteration, and halved until the objective does not increase; joint
    limits are enforced by clamping.
    """
    info = OptimizeInfo()
    free = np.arange(traj.frozen + 1, traj.n)
    if len(free) == 0:
        info.reason = "no free keyframes"
        return traj, info
    chance = None
    if beliefs:
        chance = ChanceModel(robot, beliefs, settings.method, settings.confidence)
    if window is None:
        window = sorted(beliefs) if beliefs else []
    obj = Objective(robot, world, settings, chance, window, free)

    start = time.perf_counter()
    q = np.array(traj.q)
    f, g = obj.value_and_gradient(q)
    info.costs.append(f)
    info.reason = "max iterations"
    for it in range(settings.max_iter):
        info.iterations = it + 1
        if it > 0:
            g = obj.value_and_gradient(q)[1]
        if float(np.linalg.norm(g)) < settings.grad_tol:
            info.reason = "gradient tolerance"
            break
        direction = precondition(g)
        scale = float(np.max(np.abs(direction)))
        step = -settings.step_size * direction / max(scale, 1.0)
        accepted = False
        for _ in range(settings.max_halvings):
            trial = q.copy()
            trial[free] = robot.clamp(q[free] + step)
            ft = obj.value(trial)
            if ft <= f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            info.reason = "no descent step"
            break
        q, f = trial, ft
        info.accepted += 1
        info.costs.append(f)
        if settings.time_budget is not None and time.perf_counter() - start >= settings.time_budget:
            info.reason = "time budget"
            break
    return traj.with_q(q), info


def extend_duration(traj: Trajectory, j: int, start: int | None = None) -> Trajectory:
    """Insert one keyframe before ``j`` by time-stretching the segment ``[start, j-1]``.

    The configurations ``q[start..j-1]`` are resampled, as a piecewise-linear
    path, onto one more uniformly spaced keyframe, so the arm covers the same
    joint-space path more slowly (or waits, when the segment is one keyframe).
    """
    i = traj.frozen if start is None else int(start)
    if not i < j <= traj.n:
        raise ValueError(f"cannot extend before keyframe {j} from start {i}")
    seg = traj.q[i:j]
    count = len(seg)
    s = np.linspace(0.0, count - 1, count + 1)
    lo = np.minimum(np.floor(s).astype(int), count - 1)
    hi = np.minimum(lo + 1, count - 1)
    frac = (s - lo)[:, None]
    resampled = (1.0 - frac) * seg[lo] + frac * seg[hi]
    q = np.vstack([traj.q[:i], resampled, traj.q[j:]])
    return traj.with_q(q)


# --------------------------------------------------------------------------- replanning step


@dataclass
class StepDiagnostics:
    k: int
    window: list
    probabilities: dict
    feasible: bool
    extensions: int
    iterations: int
    cost_before: float
    cost_after: float
    wall_time: float
    reason: str = ""


class InfeasibleStep(RuntimeError):
    pass


def plan_step(
    traj: Trajectory,
    cloud: PointCloud | None,
    tracker: Tracker | None,
    world: StaticWorld,
    robot: RobotModel,
    settings: PlannerSettings,
    k: int,
) -> tuple[Trajectory, StepDiagnostics]:
    """One replanning step starting at keyframe ``k``.

    Updates the tracker with ``cloud`` (when given), predicts beliefs for the
    next two planning steps, optimizes the keyframes after ``k + m`` and
    stretches time in front of any keyframe of ``[k + m, k + 2m]`` that still
    violates the chance constraint.
    """
    start = time.perf_counter()
    m = settings.steps_per_plan
    t_k = traj.t0 + k * traj.dt
    beliefs: dict[int, BeliefState] = {}
    if tracker is not None:
        if cloud is not None:
            tracker.step(cloud, t_k)
        for s, b in enumerate(tracker.predict(traj.dt, 2 * m), start=1):
            beliefs[k + s] = b
    # Before the first step nothing is moving yet, so only the start is committed.
    commit = k + m if k > 0 else k
    window = list(range(commit if k > 0 else k + 1, k + 2 * m + 1))

    traj = replace(traj, frozen=commit)
    traj, info = optimize(traj, beliefs, world, robot, settings, window)

    extensions = 0
    probs: dict[int, float] = {}
    feasible = True
    reason = info.reason
    if beliefs:
        model = ChanceModel(robot, beliefs, settings.method, settings.confidence)
        while True:
            idx = [i for i in window if i <= traj.n]
            p, _ = model.evaluate(traj.q[idx], idx)
            probs = {i: float(v) for i, v in zip(idx, p)}
            bad = [i for i in idx if probs[i] >= settings.threshold]
            if not bad:
                break
            j = bad[0]
            if j <= traj.frozen:
                feasible = False
                reason = f"committed keyframe {j} violates the chance constraint"
                break
            if extensions >= settings.max_extensions:
                feasible = False
                reason = "duration extension limit reached"
                break
            traj = extend_duration(traj, j, traj.frozen)
            extensions += 1
    diag = StepDiagnostics(
        k=k,
        window=[i for i in window if i <= traj.n],
        probabilities=probs,
        feasible=feasible,
        extensions=extensions,
        iterations=info.iterations,
        cost_before=info.costs[0] if info.costs else 0.0,
        cost_after=info.costs[-1] if info.costs else 0.0,
        wall_time=time.perf_counter() - start,
        reason=reason,
    )
    return traj, diag
