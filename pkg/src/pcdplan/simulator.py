"""Closed-loop trials: a scripted human, synthetic depth points, replanning, ground-truth audit."""

from __future__ import annotations

import csv
import io
import sys
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .collision import METHODS
from .estimation import PointCloud, ShapeModel, Tracker
from .planner import PlannerSettings, StaticWorld, initialize_trajectory, plan_step
from .robot import RobotModel, robot_from_config, workspace_length

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TAG_CLOUD = 1
TAG_JITTER = 2
FRAME_OFFSET = 100_000


class ConfigError(ValueError):
    """A scenario or benchmark file is malformed; the message names the file and field."""


# --------------------------------------------------------------------------- human


HUMAN_SPHERES = (
    # name, radius, parent
    ("pelvis", 0.14, None),
    ("abdomen", 0.13, "pelvis"),
    ("chest", 0.15, "abdomen"),
    ("head", 0.11, "chest"),
    ("r_elbow", 0.06, None),
    ("r_hand", 0.05, "r_elbow"),
    ("l_elbow", 0.06, None),
    ("l_hand", 0.05, "l_elbow"),
)
UPPER_ARM = 0.28
FOREARM = 0.28
SHOULDER_WIDTH = 0.2
SHOULDER_HEIGHT = 0.12
TORSO_OFFSETS = (0.0, 0.17, 0.35, 0.65)
POSE_SIZE = 10  # base xyz, yaw, right (elevation, azimuth, elbow), left (elevation, azimuth, elbow)


def _arm_direction(elevation, azimuth, inward):
    """Body-frame unit vector: elevation 0 hangs down, pi/2 points forward; azimuth swings toward the midline."""
    return np.stack(
        [
            np.sin(elevation) * np.cos(azimuth),
            inward * np.sin(elevation) * np.sin(azimuth),
            -np.cos(elevation),
        ],
        axis=-1,
    )


def human_sphere_centers(pose) -> np.ndarray:
    """Sphere centers (..., 8, 3) of the articulated human for pose vectors (..., 10)."""
    pose = np.asarray(pose, dtype=np.float64)
    base, yaw = pose[..., 0:3], pose[..., 3]
    c, s = np.cos(yaw), np.sin(yaw)

    def to_world(v):
        return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1], v[..., 2]], axis=-1)

    up = np.array([0.0, 0.0, 1.0])
    out = [base + h * up for h in TORSO_OFFSETS]
    chest = out[2]
    for side, off, inward in (("r", 4, 1.0), ("l", 7, -1.0)):
        shoulder = chest + to_world(np.broadcast_to(np.array([0.0, -inward * SHOULDER_WIDTH, SHOULDER_HEIGHT]), base.shape))
        a, b, e = pose[..., off], pose[..., off + 1], pose[..., off + 2]
        elbow = shoulder + UPPER_ARM * to_world(_arm_direction(a, b, inward))
        hand = elbow + FOREARM * to_world(_arm_direction(a + e, b, inward))
        out += [elbow, hand]
    return np.stack(out, axis=-2)


def human_shape_model() -> ShapeModel:
    """Shape model whose rest pose is the upright human with hanging arms."""
    rest = human_sphere_centers(np.zeros(POSE_SIZE))
    names = tuple(s[0] for s in HUMAN_SPHERES)
    return ShapeModel(
        names,
        np.zeros(len(names), dtype=np.intp),
        np.array([s[1] for s in HUMAN_SPHERES]),
        rest,
        np.array([-1 if p is None else names.index(p) for _, _, p in HUMAN_SPHERES]),
    )


@dataclass(frozen=True)
class HumanScript:
    """Pose keyframes blended with a smoothstep; poses hold before the first and after the last."""

    times: np.ndarray
    poses: np.ndarray
    position_jitter: float = 0.03
    time_jitter: float = 0.2

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        p = np.asarray(self.poses, dtype=np.float64).reshape(len(t), POSE_SIZE)
        if len(t) == 0 or np.any(np.diff(t) <= 0.0):
            raise ValueError("human keyframe times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "poses", p)

    def pose(self, t: float) -> np.ndarray:
        ts = self.times
        if t <= ts[0]:
            return self.poses[0].copy()
        if t >= ts[-1]:
            return self.poses[-1].copy()
        i = int(np.searchsorted(ts, t, side="right")) - 1
        u = (t - ts[i]) / (ts[i + 1] - ts[i])
        u = u * u * (3.0 - 2.0 * u)
        return (1.0 - u) * self.poses[i] + u * self.poses[i + 1]

    def jittered(self, seed: int) -> "HumanScript":
        """Per-trial variant: the whole motion shifted in space and time."""
        rng = np.random.default_rng([seed, 0, TAG_JITTER])
        dxy = rng.normal(scale=self.position_jitter, size=2)
        dt = rng.normal(scale=self.time_jitter)
        poses = self.poses.copy()
        poses[:, 0:2] += dxy
        return replace(self, times=self.times + dt, poses=poses)

    def centers(self, t: float) -> np.ndarray:
        return human_sphere_centers(self.pose(t))


# --------------------------------------------------------------------------- scenario


@dataclass(frozen=True)
class SensorSpec:
    position: np.ndarray = field(default_factory=lambda: np.array([-0.5, 0.0, 1.0]))
    sigma: float = 0.01
    points_per_sphere: int = 30


@dataclass(frozen=True)
class Scenario:
    name: str
    robot: RobotModel
    q_start: np.ndarray
    q_goal: np.ndarray
    duration: float
    settings: PlannerSettings
    world: StaticWorld = field(default_factory=StaticWorld)
    human: HumanScript | None = None
    sensor: SensorSpec = field(default_factory=SensorSpec)
    max_duration: float = 20.0
    warmup_frames: int = 10

    @property
    def n_keyframes(self) -> int:
        return max(2, int(round(self.duration / self.settings.keyframe_dt)))


def sample_surface_points(centers, radii, per_sphere: int, sigma: float, rng, sensor=None) -> np.ndarray:
    """Uniform points on each sphere surface plus isotropic noise.

    With ``sensor`` given, only the half of each sphere facing it is sampled.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)
    d = rng.normal(size=(len(centers), per_sphere, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    if sensor is not None:
        view = np.asarray(sensor, dtype=np.float64) - centers
        d[np.einsum("nkj,nj->nk", d, view) < 0.0] *= -1.0
    pts = (centers[:, None, :] + radii[:, None, None] * d).reshape(-1, 3)
    if sigma > 0.0:
        pts = pts + rng.normal(scale=sigma, size=pts.shape)
    return pts


def synthesize_cloud(scenario: Scenario, t: float, seed: int, human: HumanScript | None = None) -> PointCloud:
    """Noisy points on the sensor-facing half of every human sphere at time ``t``.

    ``human`` defaults to the scenario's motion jittered for ``seed``; the
    noise stream depends only on ``(seed, keyframe index)``.
    """
    if human is None:
        if scenario.human is None:
            raise ValueError("scenario has no scripted obstacle to observe")
        human = scenario.human.jittered(seed)
    frame = int(round(t / scenario.settings.keyframe_dt))
    rng = np.random.default_rng([seed, frame + FRAME_OFFSET, TAG_CLOUD])
    radii = np.array([s[1] for s in HUMAN_SPHERES])
    sensor = scenario.sensor
    pts = sample_surface_points(human.centers(t), radii, sensor.points_per_sphere, sensor.sigma, rng, sensor.position)
    return PointCloud(pts, sensor.sigma, t)


def spheres_overlap(a_centers, a_radii, b_centers, b_radii) -> bool:
    d = np.linalg.norm(np.asarray(a_centers)[:, None, :] - np.asarray(b_centers)[None, :, :], axis=-1)
    return bool(np.any(d <= np.asarray(a_radii)[:, None] + np.asarray(b_radii)[None, :]))


# --------------------------------------------------------------------------- trial


@dataclass
class TrialReport:
    scenario: str
    method: str
    seed: int
    collisions: int
    colliding_keyframes: int
    executed_keyframes: int
    checked_keyframes: int
    checked_collisions: int
    duration: float
    length: float
    extensions: int
    plan_steps: int
    infeasible_steps: int
    finished: bool
    plan_times: list = field(default_factory=list)
    step_log: list = field(default_factory=list)
    executed: np.ndarray | None = None

    CSV_FIELDS = (
        "scenario",
        "method",
        "seed",
        "collisions",
        "colliding_keyframes",
        "executed_keyframes",
        "checked_keyframes",
        "checked_collisions",
        "duration",
        "length",
        "extensions",
        "plan_steps",
        "infeasible_steps",
        "finished",
    )

    def row(self) -> list[str]:
        out = []
        for name in self.CSV_FIELDS:
            v = getattr(self, name)
            if isinstance(v, bool):
                out.append("1" if v else "0")
            elif isinstance(v, float):
                out.append(f"{v:.6f}")
            else:
                out.append(str(v))
        return out


def run_trial(scenario: Scenario, method: str | None = None, seed: int = 0) -> TrialReport:
    """Execute one closed-loop trial and audit it against the true human spheres."""
    if method is not None:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        scenario = replace(scenario, settings=replace(scenario.settings, method=method))
    st = scenario.settings
    robot = scenario.robot
    m = st.steps_per_plan
    traj = initialize_trajectory(scenario.q_start, scenario.q_goal, scenario.n_keyframes, st.keyframe_dt)
    max_index = int(round(scenario.max_duration / st.keyframe_dt))

    human = scenario.human.jittered(seed) if scenario.human is not None else None
    tracker = None
    if human is not None:
        shape = human_shape_model()
        w = scenario.warmup_frames
        tracker = Tracker(shape, human.centers(-w * st.keyframe_dt), timestamp=-w * st.keyframe_dt)
        for f in range(-w, 0):
            tracker.step(synthesize_cloud(scenario, f * st.keyframe_dt, seed, human), f * st.keyframe_dt)
        true_r = shape.radii

    colliding: list[bool] = []
    checked: dict[int, float] = {}
    checked_hits = 0
    plan_times, log = [], []
    extensions = infeasible = steps = 0

    def audit(idx: int) -> bool:
        if human is None:
            return False
        c = robot.sphere_centers(traj.q[idx])
        return spheres_overlap(c, robot.sphere_radii, human.centers(idx * st.keyframe_dt), true_r)

    colliding.append(audit(0))
    k = 0
    while True:
        cloud = synthesize_cloud(scenario, k * st.keyframe_dt, seed, human) if human is not None else None
        traj, diag = plan_step(traj, cloud, tracker, scenario.world, robot, st, k)
        steps += 1
        extensions += diag.extensions
        infeasible += 0 if diag.feasible else 1
        plan_times.append(diag.wall_time)
        log.append(diag)
        if diag.feasible:
            checked.update(diag.probabilities)
        end = min(k + m, traj.n, max_index)
        for idx in range(k + 1, end + 1):
            hit = audit(idx)
            colliding.append(hit)
            if idx in checked:
                checked_hits += int(hit)
            if tracker is not None and idx < end:
                tracker.step(synthesize_cloud(scenario, idx * st.keyframe_dt, seed, human), idx * st.keyframe_dt)
        k = end
        if k >= traj.n or k >= max_index:
            break

    executed = np.array(traj.q[: k + 1])
    hits = np.asarray(colliding, dtype=bool)
    events = int(np.sum(hits[1:] & ~hits[:-1]) + (1 if hits[0] else 0))
    n_checked = sum(1 for i in checked if 0 < i <= k)
    return TrialReport(
        scenario=scenario.name,
        method=st.method,
        seed=seed,
        collisions=events,
        colliding_keyframes=int(hits.sum()),
        executed_keyframes=len(hits),
        checked_keyframes=n_checked,
        checked_collisions=checked_hits,
        duration=k * st.keyframe_dt,
        length=workspace_length(robot, executed),
        extensions=extensions,
        plan_steps=steps,
        infeasible_steps=infeasible,
        finished=k >= traj.n,
        plan_times=plan_times,
        step_log=log,
        executed=executed,
    )


# --------------------------------------------------------------------------- config files


def _load_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: file not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


class _Fields:
    """Typed lookups into nested TOML tables with ``file: a.b.c: problem`` errors."""

    def __init__(self, path, data: dict):
        self.path = path
        self.data = data

    def fail(self, key: str, msg: str):
        raise ConfigError(f"{self.path}: {key}: {msg}")

    def get(self, key: str, default: Any = ...):
        cur: Any = self.data
        for part in key.split("."):
            if not isinstance(cur, dict) or part not in cur:
                if default is ...:
                    self.fail(key, "missing required field")
                return default
            cur = cur[part]
        return cur

    def number(self, key, default: Any = ..., positive=False):
        v = self.get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(key, f"expected a number, got {v!r}")
        if positive and not v > 0:
            self.fail(key, f"must be positive, got {v!r}")
        return float(v)

    def integer(self, key, default: Any = ..., minimum=None):
        v = self.get(key, default)
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(key, f"expected an integer, got {v!r}")
        if minimum is not None and v < minimum:
            self.fail(key, f"must be at least {minimum}, got {v!r}")
        return v

    def vector(self, key, size=None, default: Any = ...):
        v = self.get(key, default)
        if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            self.fail(key, f"expected an array of numbers, got {v!r}")
        if size is not None and len(v) != size:
            self.fail(key, f"expected {size} values, got {len(v)}")
        return np.array(v, dtype=np.float64)


def _planner_settings(f: _Fields) -> PlannerSettings:
    kw = {}
    for key, kind in (
        ("confidence", "n"),
        ("keyframe_dt", "n"),
        ("step_size", "n"),
        ("clearance", "n"),
        ("collision_weight", "n"),
        ("time_budget", "n"),
        ("steps_per_plan", "i"),
        ("max_iter", "i"),
        ("max_extensions", "i"),
    ):
        full = f"planner.{key}"
        if f.get(full, None) is None:
            continue
        kw[key] = f.number(full) if kind == "n" else f.integer(full, minimum=0)
    method = f.get("planner.method", "bound")
    if method not in METHODS:
        f.fail("planner.method", f"expected one of {METHODS}, got {method!r}")
    kw["method"] = method
    try:
        return PlannerSettings(**kw)
    except ValueError as exc:
        f.fail("planner", str(exc))


def _human(f: _Fields) -> HumanScript | None:
    frames = f.get("human.keyframes", None)
    if frames is None:
        return None
    if not isinstance(frames, list) or not frames:
        f.fail("human.keyframes", "expected a non-empty array of tables")
    times, poses = [], []
    for i, _ in enumerate(frames):
        key = f"human.keyframes.{i}"
        sub = _Fields(f.path, {"k": frames[i]})
        t = sub.number("k.t") if isinstance(frames[i], dict) else f.fail(key, "expected a table")
        base = sub.vector("k.base", 3)
        yaw = sub.number("k.yaw", 0.0)
        right = sub.vector("k.right", 3, [0.0, 0.0, 0.0])
        left = sub.vector("k.left", 3, [0.0, 0.0, 0.0])
        times.append(t)
        poses.append(np.r_[base, yaw, right, left])
    try:
        return HumanScript(
            np.array(times),
            np.array(poses),
            f.number("human.position_jitter", 0.03),
            f.number("human.time_jitter", 0.2),
        )
    except ValueError as exc:
        f.fail("human.keyframes", str(exc))


def _world(f: _Fields) -> StaticWorld:
    boxes = f.get("static.boxes", [])
    spheres = f.get("static.spheres", [])
    bc, bh, sc, sr = [], [], [], []
    for i, b in enumerate(boxes):
        sub = _Fields(f.path, {"static": {"boxes": {str(i): b}}})
        bc.append(sub.vector(f"static.boxes.{i}.center", 3))
        bh.append(sub.vector(f"static.boxes.{i}.half_extents", 3))
    for i, s in enumerate(spheres):
        sub = _Fields(f.path, {"static": {"spheres": {str(i): s}}})
        sc.append(sub.vector(f"static.spheres.{i}.center", 3))
        sr.append(sub.number(f"static.spheres.{i}.radius", positive=True))
    try:
        return StaticWorld(
            np.array(sc).reshape(-1, 3), np.array(sr), np.array(bc).reshape(-1, 3), np.array(bh).reshape(-1, 3)
        )
    except ValueError as exc:
        f.fail("static", str(exc))


def scenario_from_dict(data: dict, path="<scenario>") -> Scenario:
    f = _Fields(path, data)
    robot_cfg = f.get("robot", {"builtin": "tabletop6"})
    try:
        robot = robot_from_config(robot_cfg)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: robot: {exc}") from exc
    q_s = f.vector("scenario.q_start", robot.dof)
    q_g = f.vector("scenario.q_goal", robot.dof)
    for key, q in (("scenario.q_start", q_s), ("scenario.q_goal", q_g)):
        if not robot.within_limits(q):
            f.fail(key, "outside the joint limits")
    sensor = SensorSpec(
        f.vector("sensor.position", 3, [-0.5, 0.0, 1.0]),
        f.number("sensor.sigma", 0.01, positive=True),
        f.integer("sensor.points_per_sphere", 30, minimum=1),
    )
    return Scenario(
        name=str(f.get("scenario.name", Path(str(path)).stem)),
        robot=robot,
        q_start=q_s,
        q_goal=q_g,
        duration=f.number("scenario.duration", positive=True),
        settings=_planner_settings(f),
        world=_world(f),
        human=_human(f),
        sensor=sensor,
        max_duration=f.number("scenario.max_duration", 20.0, positive=True),
        warmup_frames=f.integer("scenario.warmup_frames", 10, minimum=0),
    )


def builtin_scenarios() -> list[str]:
    return sorted(
        p.name[: -len(".toml")]
        for p in resources.files("pcdplan.data").iterdir()
        if p.name.endswith(".toml") and not p.name.startswith("bench_") and p.name != "method_comparison.toml"
    )


def data_path(name: str) -> Path:
    return Path(str(resources.files("pcdplan.data").joinpath(name)))


def load_scenario(ref: str | Path, relative_to: Path | None = None) -> Scenario:
    """Load a scenario file, or a shipped scenario by bare name."""
    p = Path(ref)
    if p.suffix != ".toml" and str(ref) in builtin_scenarios():
        p = data_path(f"{ref}.toml")
    elif not p.is_absolute() and relative_to is not None and not p.exists():
        p = relative_to / p
    return scenario_from_dict(_load_toml(p), p)


@dataclass(frozen=True)
class BenchmarkConfig:
    name: str
    scenarios: tuple
    methods: tuple
    seeds: tuple

    @classmethod
    def load(cls, path) -> "BenchmarkConfig":
        path = Path(path)
        f = _Fields(path, _load_toml(path))
        refs = f.get("benchmark.scenarios")
        if not isinstance(refs, list) or not refs or not all(isinstance(r, str) for r in refs):
            f.fail("benchmark.scenarios", "expected a non-empty array of scenario names or paths")
        methods = f.get("benchmark.methods", list(METHODS))
        if not isinstance(methods, list) or not methods or any(m not in METHODS for m in methods):
            f.fail("benchmark.methods", f"expected a non-empty array drawn from {METHODS}, got {methods!r}")
        count = f.integer("benchmark.seeds", minimum=1)
        first = f.integer("benchmark.first_seed", 0, minimum=0)
        scenarios = []
        for i, r in enumerate(refs):
            try:
                scenarios.append(load_scenario(r, path.parent))
            except ConfigError as exc:
                raise ConfigError(f"{path}: benchmark.scenarios.{i}: {exc}") from exc
        return cls(
            str(f.get("benchmark.name", path.stem)),
            tuple(scenarios),
            tuple(methods),
            tuple(range(first, first + count)),
        )


SUMMARY_FIELDS = (
    "scenario",
    "method",
    "trials",
    "collisions_mean",
    "duration_mean",
    "length_mean",
    "colliding_keyframe_rate",
    "checked_collision_rate",
    "infeasible_steps_mean",
    "finished_rate",
)


def summarize(reports: Sequence[TrialReport]) -> list[dict]:
    """Per (scenario, method) means mirroring the collisions / duration / length comparison."""
    groups: dict[tuple, list[TrialReport]] = {}
    for r in reports:
        groups.setdefault((r.scenario, r.method), []).append(r)
    rows = []
    for (scn, meth), rs in groups.items():
        executed = sum(r.executed_keyframes for r in rs)
        checked = sum(r.checked_keyframes for r in rs)
        rows.append(
            {
                "scenario": scn,
                "method": meth,
                "trials": len(rs),
                "collisions_mean": float(np.mean([r.collisions for r in rs])),
                "duration_mean": float(np.mean([r.duration for r in rs])),
                "length_mean": float(np.mean([r.length for r in rs])),
                "colliding_keyframe_rate": sum(r.colliding_keyframes for r in rs) / max(executed, 1),
                "checked_collision_rate": sum(r.checked_collisions for r in rs) / max(checked, 1),
                "infeasible_steps_mean": float(np.mean([r.infeasible_steps for r in rs])),
                "finished_rate": float(np.mean([r.finished for r in rs])),
            }
        )
    return rows


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def trials_csv(reports: Sequence[TrialReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TrialReport.CSV_FIELDS)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def summary_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in SUMMARY_FIELDS])
    return buf.getvalue()


def timings_csv(reports: Sequence[TrialReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("scenario", "method", "seed", "plan_steps", "plan_time_mean", "plan_time_max"))
    for r in reports:
        t = r.plan_times or [0.0]
        w.writerow((r.scenario, r.method, r.seed, len(r.plan_times), f"{np.mean(t):.6f}", f"{np.max(t):.6f}"))
    return buf.getvalue()


def run_benchmark(config, out_dir=None, progress=None) -> tuple[list[TrialReport], list[dict]]:
    """Run scenarios x methods x seeds.

    Writes ``trials.csv`` and ``summary.csv`` (deterministic) and
    ``timings.csv`` (wall-clock, machine dependent) when ``out_dir`` is given.
    """
    cfg = config if isinstance(config, BenchmarkConfig) else BenchmarkConfig.load(config)
    reports = []
    for scn in cfg.scenarios:
        for meth in cfg.methods:
            for seed in cfg.seeds:
                start = time.perf_counter()
                rep = run_trial(scn, meth, seed)
                reports.append(rep)
                if progress is not None:
                    progress(rep, time.perf_counter() - start)
    rows = summarize(reports)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trials.csv").write_text(trials_csv(reports))
        (out / "summary.csv").write_text(summary_csv(rows))
        (out / "timings.csv").write_text(timings_csv(reports))
    return reports, rows
