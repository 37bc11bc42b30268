"""Belief-state estimation for sphere-modelled obstacles.

Point clouds are explained by a shape model (a set of spheres per obstacle
with rest positions), each sphere center is tracked by a constant-velocity
Kalman filter, and future beliefs are obtained by open-loop prediction with
a pull that keeps linked spheres at their rest distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .collision import GaussianSphere, ObstacleTable
from .gaussian import COV_FLOOR, Gaussian3, symmetrize

DEFAULT_SIGMA_A = 0.5
HISTORY_FRAMES = 10
PENALTY_SCALE = 1e3


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShapeModel:
    """Sphere model of every tracked obstacle, flattened.

    ``parent[i]`` names the sphere that sphere ``i`` is linked to (``-1`` for
    a root). Links carry the distance-preservation constraint; parents must
    precede their children.
    """

    names: tuple
    obstacle: np.ndarray
    radii: np.ndarray
    rest: np.ndarray
    parent: np.ndarray

    def __post_init__(self):
        n = len(self.names)
        obstacle = np.asarray(self.obstacle, dtype=np.intp)
        radii = np.asarray(self.radii, dtype=np.float64)
        rest = np.asarray(self.rest, dtype=np.float64).reshape(n, 3)
        parent = np.asarray(self.parent, dtype=np.intp)
        if not (len(obstacle) == len(radii) == len(parent) == n):
            raise ValueError("shape model arrays must have one entry per sphere")
        if np.any(radii <= 0.0):
            raise ValueError("sphere radii must be positive")
        if np.any(np.diff(obstacle) < 0):
            raise ValueError("spheres must be listed grouped by obstacle")
        for i, p in enumerate(parent):
            if p >= 0 and (p >= i or obstacle[p] != obstacle[i]):
                raise ValueError(f"sphere {self.names[i]!r}: parent must be an earlier sphere of the same obstacle")
        object.__setattr__(self, "obstacle", obstacle)
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "rest", rest)
        object.__setattr__(self, "parent", parent)

    def __len__(self):
        return len(self.names)

    @cached_property
    def edges(self) -> list[tuple[int, int, float]]:
        """(child, parent, rest distance) for every link."""
        return [
            (i, int(p), float(np.linalg.norm(self.rest[i] - self.rest[p])))
            for i, p in enumerate(self.parent)
            if p >= 0
        ]

    def c_dist(self, i: int, j: int) -> float:
        return float(np.linalg.norm(self.rest[i] - self.rest[j]))

    def posed(self, rotation=None, translation=(0.0, 0.0, 0.0)) -> np.ndarray:
        r = np.eye(3) if rotation is None else np.asarray(rotation)
        return self.rest @ r.T + np.asarray(translation, dtype=np.float64)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    sensor_sigma: float
    timestamp: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not self.sensor_sigma > 0.0:
            raise ValueError("sensor sigma must be positive")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class TrackState:
    """Position/velocity estimate ``[p; v]`` of one sphere center."""

    x: np.ndarray
    P: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).reshape(6)
        P = symmetrize(np.asarray(self.P, dtype=np.float64))
        if P.shape != (6, 6):
            raise ValueError("track covariance must be 6x6")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "P", P)

    @property
    def position(self) -> np.ndarray:
        return self.x[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.x[3:]

    @property
    def position_cov(self) -> np.ndarray:
        return self.P[:3, :3]


@dataclass(frozen=True)
class BeliefState:
    timestamp: float
    spheres: tuple
    groups: tuple

    @cached_property
    def table(self) -> ObstacleTable:
        return ObstacleTable(self.spheres, self.groups)

    def grouped(self) -> list[list[GaussianSphere]]:
        out: dict[int, list] = {}
        for s, g in zip(self.spheres, self.groups):
            out.setdefault(g, []).append(s)
        return [out[k] for k in sorted(out)]


def belief_from_tracks(model: ShapeModel, tracks: Sequence[TrackState], timestamp: float) -> BeliefState:
    spheres = tuple(
        GaussianSphere(Gaussian3(t.position, t.position_cov), float(r)) for t, r in zip(tracks, model.radii)
    )
    return BeliefState(timestamp, spheres, tuple(int(g) for g in model.obstacle))


# --------------------------------------------------------------------------- fitting


@dataclass
class FitResult:
    positions: np.ndarray
    assignment: np.ndarray
    iterations: int
    objective: list = field(default_factory=list)


def _assign(positions, radii, points):
    dist = np.linalg.norm(points[:, None, :] - positions[None, :, :], axis=2)
    res = dist - radii[None, :]
    a = np.argmin(res * res, axis=1)
    return a


def _band_excess(d, c, eps):
    if d > (1.0 + eps) * c:
        return d - (1.0 + eps) * c
    if d < (1.0 - eps) * c:
        return d - (1.0 - eps) * c
    return 0.0


def _objective(positions, radii, points, assign, sigma, edges, eps, weight):
    d = np.linalg.norm(positions[assign] - points, axis=1) - radii[assign]
    f = 0.5 * float(np.sum(d * d)) / sigma**2
    for i, h, c in edges:
        e = _band_excess(float(np.linalg.norm(positions[i] - positions[h])), c, eps)
        f += 0.5 * weight * e * e
    return f


def _normal_equations(positions, radii, points, assign, sigma, edges, eps, weight):
    m = len(positions)
    H = np.zeros((3 * m, 3 * m))
    g = np.zeros(3 * m)
    diff = positions[assign] - points
    dist = np.linalg.norm(diff, axis=1)
    nrm = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0.0)
    res = dist - radii[assign]
    outer = np.einsum("ki,kj->kij", nrm, nrm) / sigma**2
    blocks = np.zeros((m, 3, 3))
    np.add.at(blocks, assign, outer)
    grads = np.zeros((m, 3))
    np.add.at(grads, assign, nrm * (res / sigma**2)[:, None])
    for i in range(m):
        H[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = blocks[i]
        g[3 * i : 3 * i + 3] = grads[i]
    for i, h, c in edges:
        v = positions[i] - positions[h]
        d = float(np.linalg.norm(v))
        e = _band_excess(d, c, eps)
        if e == 0.0 or d == 0.0:
            continue
        u = v / d
        uu = weight * np.outer(u, u)
        si, sh = slice(3 * i, 3 * i + 3), slice(3 * h, 3 * h + 3)
        H[si, si] += uu
        H[sh, sh] += uu
        H[si, sh] -= uu
        H[sh, si] -= uu
        g[si] += weight * e * u
        g[sh] -= weight * e * u
    return H, g


def fit_environment_state(
    model: ShapeModel,
    cloud: PointCloud,
    init,
    eps: float = 0.05,
    max_iter: int = 50,
    tol: float = 1e-5,
    penalty_scale: float = PENALTY_SCALE,
) -> FitResult:
    """Fit sphere centers to a point cloud under the link-length band constraint.

    Each point's residual is its distance to the nearest sphere surface,
    scaled by the sensor sigma. Linked spheres whose distance leaves
    ``[(1 - eps), (1 + eps)] * rest`` pay a quadratic penalty of weight
    ``penalty_scale / sigma**2``. The loop alternates nearest-surface
    assignment with one damped Gauss-Newton step; neither step increases the
    objective.
    """
    if len(cloud) == 0:
        raise FitError("cannot fit an empty point cloud")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    positions = np.array(init.positions if hasattr(init, "positions") else init, dtype=np.float64).reshape(-1, 3)
    if positions.shape[0] != len(model):
        raise ValueError("initial state needs one position per model sphere")
    points, sigma, radii = cloud.points, cloud.sensor_sigma, model.radii
    weight = penalty_scale / sigma**2
    edges = model.edges

    history = []
    mu = 1e-3
    increases = 0
    assign = _assign(positions, radii, points)
    f = _objective(positions, radii, points, assign, sigma, edges, eps, weight)
    history.append(f)
    it = 0
    for it in range(1, max_iter + 1):
        assign = _assign(positions, radii, points)
        f_assigned = _objective(positions, radii, points, assign, sigma, edges, eps, weight)
        if f_assigned > f * (1.0 + 1e-12) + 1e-300:
            increases += 1
            if increases >= 5:
                raise FitError("fit diverged: objective rose for 5 consecutive iterations")
        else:
            increases = 0
        f = f_assigned
        H, g = _normal_equations(positions, radii, points, assign, sigma, edges, eps, weight)
        if not np.any(g):
            history.append(f)
            break
        scale = np.maximum(np.diag(H), 1e-12 * max(1.0, float(np.max(np.diag(H)))))
        step = None
        for _ in range(30):
            delta = np.linalg.solve(H + mu * np.diag(scale) + 1e-12 * np.eye(len(g)), -g).reshape(-1, 3)
            trial = positions + delta
            f_trial = _objective(trial, radii, points, assign, sigma, edges, eps, weight)
            if f_trial <= f:
                step = delta
                mu = max(mu / 3.0, 1e-9)
                break
            mu *= 10.0
        if step is None:
            history.append(f)
            break
        positions = trial
        f = f_trial
        history.append(f)
        if float(np.max(np.abs(step))) < tol:
            break
    return FitResult(positions, _assign(positions, radii, points), it, history)


def observation_covariance(points, sensor_sigma: float, center) -> np.ndarray:
    """Covariance of a fitted sphere center implied by the points assigned to it.

    Each point pins the center only along its viewing normal, so information
    adds up as ``sum n n^T / sigma^2``; directions no point constrains stay at
    the ``1 / COV_FLOOR`` level.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    diff = np.asarray(center, dtype=np.float64)[None, :] - pts
    dist = np.linalg.norm(diff, axis=1)
    nrm = diff[dist > 0.0] / dist[dist > 0.0, None]
    info = nrm.T @ nrm / sensor_sigma**2
    return symmetrize(np.linalg.inv(info + COV_FLOOR * np.eye(3)))


# --------------------------------------------------------------------------- filtering


def transition(dt: float) -> tuple[np.ndarray, np.ndarray]:
    eye = np.eye(3)
    A = np.block([[eye, dt * eye], [np.zeros((3, 3)), eye]])
    B = np.vstack([eye, dt * eye])
    return A, B


def kf_predict(track: TrackState, dt: float, u=None, process_cov=None) -> TrackState:
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    A, B = transition(dt)
    x = A @ track.x
    if u is not None:
        x = x + B @ np.asarray(u, dtype=np.float64)
    P = A @ track.P @ A.T
    if process_cov is not None:
        P = P + process_cov
    return TrackState(x, P, track.timestamp + dt)


def kf_update(track: TrackState, z, obs_cov) -> TrackState:
    """Measurement update with ``z = [I 0] x + v``, ``v ~ N(0, obs_cov)`` (Joseph form)."""
    H = np.hstack([np.eye(3), np.zeros((3, 3))])
    R = symmetrize(np.asarray(obs_cov, dtype=np.float64))
    S = H @ track.P @ H.T + R
    if np.linalg.eigvalsh(symmetrize(S))[0] < COV_FLOOR:
        S = S + COV_FLOOR * np.eye(3)
    K = np.linalg.solve(S, H @ track.P).T
    x = track.x + K @ (np.asarray(z, dtype=np.float64) - H @ track.x)
    IKH = np.eye(6) - K @ H
    P = IKH @ track.P @ IKH.T + K @ R @ K.T
    return TrackState(x, P, track.timestamp)


def length_preserving_input(p_j, p_h, rest_distance: float) -> np.ndarray:
    """Pull on sphere ``j`` that restores its rest distance to sphere ``h``."""
    p_j = np.asarray(p_j, dtype=np.float64)
    p_h = np.asarray(p_h, dtype=np.float64)
    d = float(np.linalg.norm(p_j - p_h))
    if d <= 1e-9:
        return np.zeros(3)
    return (p_h - p_j) * (1.0 - rest_distance / d)


def accelerations_from_positions(history, dt: float) -> np.ndarray:
    h = np.asarray(history, dtype=np.float64).reshape(-1, 3)
    if len(h) < 3:
        return np.zeros((0, 3))
    return (h[2:] - 2.0 * h[1:-1] + h[:-2]) / dt**2


def process_covariance(accel_history, dt: float, default_sigma_a: float = DEFAULT_SIGMA_A) -> np.ndarray:
    """Process noise ``blockdiag(dt^4/4 Sa, dt^2/4 Sa)`` from the spread of recent accelerations."""
    acc = np.asarray(accel_history, dtype=np.float64).reshape(-1, 3)
    if len(acc) >= 2:
        sa = np.cov(acc, rowvar=False)
    else:
        sa = default_sigma_a**2 * np.eye(3)
    Q = np.zeros((6, 6))
    Q[:3, :3] = 0.25 * dt**4 * sa
    Q[3:, 3:] = 0.25 * dt**2 * sa
    return symmetrize(Q) + COV_FLOOR * np.eye(6)


def propagate(model: ShapeModel, tracks: Sequence[TrackState], dt: float, process_covs) -> list[TrackState]:
    """One prediction step for all spheres of the model.

    Each linked sphere gets the pull computed against where its parent ends
    up after this step, evaluated at its own constant-velocity prediction,
    so a chain that starts at rest length stays there.
    """
    A, _ = transition(dt)
    drift = [A @ t.x for t in tracks]
    out: list[TrackState] = []
    for i, t in enumerate(tracks):
        p = model.parent[i]
        u = None
        if p >= 0:
            rest = model.c_dist(i, p)
            u = length_preserving_input(drift[i][:3], out[p].x[:3], rest)
        out.append(kf_predict(t, dt, u, process_covs[i]))
    return out


def predict_belief(
    model: ShapeModel, tracks: Sequence[TrackState], dt: float, m_steps: int, process_covs
) -> list[BeliefState]:
    """Open-loop beliefs at ``dt, 2 dt, ..., m_steps dt`` after the tracks' timestamp."""
    if m_steps < 1:
        raise ValueError("m_steps must be at least 1")
    beliefs = []
    cur = list(tracks)
    for _ in range(m_steps):
        cur = propagate(model, cur, dt, process_covs)
        beliefs.append(belief_from_tracks(model, cur, cur[0].timestamp))
    return beliefs


class Tracker:
    """Frame-by-frame fit, filter and predict loop for one shape model."""

    def __init__(
        self,
        model: ShapeModel,
        init_positions,
        timestamp: float = 0.0,
        eps: float = 0.05,
        velocity_sigma: float = 1.0,
        position_sigma: float = 0.05,
        default_sigma_a: float = DEFAULT_SIGMA_A,
        history: int = HISTORY_FRAMES,
    ):
        self.model = model
        self.eps = eps
        self.default_sigma_a = default_sigma_a
        self.history_len = history
        pos = np.asarray(init_positions, dtype=np.float64).reshape(len(model), 3)
        P0 = np.diag([position_sigma**2] * 3 + [velocity_sigma**2] * 3)
        self.tracks = [TrackState(np.r_[p, 0.0, 0.0, 0.0], P0, timestamp) for p in pos]
        self.observed: list[list[np.ndarray]] = [[] for _ in range(len(model))]
        self.last_fit: FitResult | None = None

    @property
    def timestamp(self) -> float:
        return self.tracks[0].timestamp

    def process_covs(self, dt: float) -> list[np.ndarray]:
        return [
            process_covariance(accelerations_from_positions(h, dt), dt, self.default_sigma_a)
            for h in self.observed
        ]

    def step(self, cloud: PointCloud, timestamp: float) -> list[TrackState]:
        dt = timestamp - self.timestamp
        if dt > 0.0:
            self.tracks = propagate(self.model, self.tracks, dt, self.process_covs(dt))
        elif dt < 0.0:
            raise ValueError("frames must arrive in time order")
        if len(cloud) == 0:
            return self.tracks
        fit = fit_environment_state(self.model, cloud, np.array([t.position for t in self.tracks]), self.eps)
        self.last_fit = fit
        updated = []
        for i, t in enumerate(self.tracks):
            pts = cloud.points[fit.assignment == i]
            if len(pts) == 0:
                updated.append(t)
                continue
            R = observation_covariance(pts, cloud.sensor_sigma, fit.positions[i])
            updated.append(kf_update(t, fit.positions[i], R))
            self.observed[i].append(fit.positions[i].copy())
            del self.observed[i][: -self.history_len]
        self.tracks = updated
        return self.tracks

    def belief(self) -> BeliefState:
        return belief_from_tracks(self.model, self.tracks, self.timestamp)

    def predict(self, dt: float, m_steps: int) -> list[BeliefState]:
        return predict_belief(self.model, self.tracks, dt, m_steps, self.process_covs(dt))


# --------------------------------------------------------------------------- file formats


def shape_model_from_config(cfg) -> ShapeModel:
    """Parse ``{"obstacles": [{"name", "spheres": [{"name", "radius", "rest", "parent"}]}]}``.

    ``parent`` refers to a sphere name within the same obstacle.
    """
    names, obstacle, radii, rest, parent = [], [], [], [], []
    obstacles = cfg.get("obstacles")
    if not obstacles:
        raise ValueError("shape model: 'obstacles' must be a non-empty array")
    for oi, ob in enumerate(obstacles):
        local: dict[str, int] = {}
        for si, s in enumerate(ob.get("spheres", [])):
            where = f"obstacles[{oi}].spheres[{si}]"
            try:
                name = str(s.get("name", f"{ob.get('name', oi)}_{si}"))
                r = float(s["radius"])
                pos = [float(v) for v in s["rest"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{where}: {exc}") from exc
            if len(pos) != 3:
                raise ValueError(f"{where}.rest: expected 3 coordinates")
            par = s.get("parent")
            if par is not None and par not in local:
                raise ValueError(f"{where}.parent: {par!r} is not an earlier sphere of this obstacle")
            local[name] = len(names)
            names.append(name)
            obstacle.append(oi)
            radii.append(r)
            rest.append(pos)
            parent.append(-1 if par is None else local[par])
    return ShapeModel(tuple(names), np.array(obstacle), np.array(radii), np.array(rest), np.array(parent))


def write_cloud_frames(path, clouds: Sequence[PointCloud]) -> None:
    """One ``t x y z`` record per line; a ``# sigma`` header records the sensor noise."""
    with open(path, "w") as fh:
        sig = float(clouds[0].sensor_sigma) if clouds else 0.0
        fh.write(f"# sigma {sig!r}\n")
        for c in clouds:
            t = float(c.timestamp)
            for x, y, z in c.points.tolist():
                fh.write(f"{t!r} {x!r} {y!r} {z!r}\n")


def read_cloud_frames(path, sensor_sigma: float | None = None) -> list[PointCloud]:
    frames: dict[float, list] = {}
    sigma = sensor_sigma
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "sigma" and sigma is None:
                    sigma = float(parts[1])
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 't x y z', got {len(parts)} fields")
            try:
                t, x, y, z = (float(v) for v in parts)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            frames.setdefault(t, []).append((x, y, z))
    if sigma is None or not sigma > 0.0:
        raise ValueError(f"{path}: sensor sigma missing; pass it explicitly or add a '# sigma' header")
    return [PointCloud(np.array(v), sigma, t) for t, v in sorted(frames.items())]
