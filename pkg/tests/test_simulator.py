import numpy as np
import pytest

from pcdplan.planner import initialize_trajectory
from pcdplan.robot import workspace_length
from pcdplan.simulator import (
    HUMAN_SPHERES,
    BenchmarkConfig,
    ConfigError,
    HumanScript,
    TrialReport,
    builtin_scenarios,
    human_shape_model,
    load_scenario,
    run_benchmark,
    run_trial,
    sample_surface_points,
    scenario_from_dict,
    synthesize_cloud,
)

EMPTY = {
    "scenario": {"name": "bare", "duration": 1.5, "q_start": [0.9, 0.6, 1.3, 0.8, 0, 0], "q_goal": [-0.9, 0.6, 1.3, 0.8, 0, 0]},
    "robot": {"builtin": "tabletop6"},
    "planner": {"max_iter": 5},
}


def test_shipped_scenarios_load():
    names = builtin_scenarios()
    assert {"arm_crossing", "empty_table"} <= set(names)
    for n in names:
        scn = load_scenario(n)
        assert scn.robot.within_limits(scn.q_start)
    crossing = load_scenario("arm_crossing")
    assert crossing.human is not None and crossing.settings.confidence == 0.99


def test_noise_free_points_lie_on_surfaces(rng):
    centers = rng.uniform(-1, 1, (4, 3))
    radii = rng.uniform(0.05, 0.2, 4)
    pts = sample_surface_points(centers, radii, 200, 0.0, rng).reshape(4, 200, 3)
    d = np.linalg.norm(pts - centers[:, None, :], axis=-1)
    assert np.allclose(d, radii[:, None], atol=1e-12)


def test_points_face_the_sensor(rng):
    centers = rng.uniform(-1, 1, (3, 3))
    sensor = np.array([0.0, -3.0, 1.0])
    pts = sample_surface_points(centers, np.full(3, 0.1), 500, 0.0, rng, sensor).reshape(3, 500, 3)
    facing = np.einsum("nkj,nj->nk", pts - centers[:, None, :], sensor - centers)
    assert np.all(facing >= 0.0)


def test_residual_spread_matches_sensor_sigma(rng):
    sigma = 0.01
    pts = sample_surface_points(np.zeros((1, 3)), [0.15], 10_000, sigma, rng)
    res = np.linalg.norm(pts, axis=1) - 0.15
    assert np.std(res) == pytest.approx(sigma, rel=0.1)


def test_cloud_is_deterministic_per_time_and_seed():
    scn = load_scenario("arm_crossing")
    a = synthesize_cloud(scn, 0.3, 4)
    b = synthesize_cloud(scn, 0.3, 4)
    c = synthesize_cloud(scn, 0.4, 4)
    d = synthesize_cloud(scn, 0.3, 5)
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points) and not np.array_equal(a.points, d.points)
    assert len(a) == len(HUMAN_SPHERES) * scn.sensor.points_per_sphere
    with pytest.raises(ValueError):
        synthesize_cloud(scenario_from_dict(EMPTY), 0.0, 0)


def test_scripted_human_keeps_rest_distances():
    scn = load_scenario("arm_crossing")
    shape = human_shape_model()
    for seed in range(3):
        human = scn.human.jittered(seed)
        for t in np.linspace(-1.0, 7.0, 81):
            c = human.centers(t)
            for i, h, rest in shape.edges:
                assert abs(np.linalg.norm(c[i] - c[h]) / rest - 1.0) < 1e-9


def test_jitter_is_seeded():
    script = HumanScript([0.0, 1.0], np.zeros((2, 10)))
    assert np.array_equal(script.jittered(3).poses, script.jittered(3).poses)
    assert not np.array_equal(script.jittered(3).poses, script.jittered(4).poses)
    with pytest.raises(ValueError):
        HumanScript([1.0, 0.0], np.zeros((2, 10)))


def test_empty_trial_follows_initial_path():
    scn = scenario_from_dict(EMPTY)
    rep = run_trial(scn, "bound", 0)
    init = initialize_trajectory(scn.q_start, scn.q_goal, scn.n_keyframes, scn.settings.keyframe_dt)
    assert rep.collisions == 0 and rep.finished
    assert rep.duration == pytest.approx(init.duration)
    assert rep.length == pytest.approx(workspace_length(scn.robot, init.q), rel=1e-12)
    assert np.allclose(rep.executed, init.q, atol=1e-12)
    assert rep.extensions == 0 and rep.infeasible_steps == 0


def test_crossing_trial_report_is_consistent():
    scn = load_scenario("arm_crossing")
    rep = run_trial(scn, "bound", 1)
    assert rep.finished and rep.duration >= scn.duration - 1e-9
    assert rep.executed_keyframes == len(rep.executed)
    assert 0 <= rep.checked_collisions <= rep.checked_keyframes
    assert rep.collisions <= rep.colliding_keyframes
    assert len(rep.plan_times) == rep.plan_steps == len(rep.step_log)
    row = rep.row()
    assert len(row) == len(TrialReport.CSV_FIELDS) and row[-1] == "1"
    with pytest.raises(ValueError):
        run_trial(scn, "exact", 0)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_config_errors_name_the_field(tmp_path):
    bad_syntax = write(tmp_path, "a.toml", "[scenario\nduration = 1\n")
    with pytest.raises(ConfigError, match="line 1"):
        load_scenario(bad_syntax)
    missing = write(tmp_path, "b.toml", "[scenario]\nq_start = [0,0,0,0,0,0]\nq_goal = [0,0,0,0,0,0]\n")
    with pytest.raises(ConfigError, match="scenario.duration: missing required field"):
        load_scenario(missing)
    wrong = write(tmp_path, "c.toml", "[scenario]\nduration = 1\nq_start = [0,0,0]\nq_goal = [0,0,0,0,0,0]\n")
    with pytest.raises(ConfigError, match="scenario.q_start: expected 6 values"):
        load_scenario(wrong)
    method = write(tmp_path, "d.toml", "[scenario]\nduration = 1\nq_start = [0,0,0,0,0,0]\nq_goal = [0,0,0,0,0,0]\n[planner]\nmethod = 'exact'\n")
    with pytest.raises(ConfigError, match="planner.method"):
        load_scenario(method)
    sigma = write(tmp_path, "e.toml", "[scenario]\nduration = 1\nq_start = [0,0,0,0,0,0]\nq_goal = [0,0,0,0,0,0]\n[sensor]\nsigma = -1\n")
    with pytest.raises(ConfigError, match="sensor.sigma: must be positive"):
        load_scenario(sigma)
    human = write(tmp_path, "f.toml", "[scenario]\nduration = 1\nq_start = [0,0,0,0,0,0]\nq_goal = [0,0,0,0,0,0]\n[[human.keyframes]]\nt = 0\n")
    with pytest.raises(ConfigError, match="base"):
        load_scenario(human)
    with pytest.raises(ConfigError, match="file not found"):
        load_scenario(tmp_path / "nope.toml")
    bench = write(tmp_path, "g.toml", "[benchmark]\nscenarios = ['empty_table']\nmethods = ['bound', 'magic']\nseeds = 1\n")
    with pytest.raises(ConfigError, match="benchmark.methods"):
        BenchmarkConfig.load(bench)
    bench = write(tmp_path, "h.toml", "[benchmark]\nscenarios = ['missing.toml']\nseeds = 1\n")
    with pytest.raises(ConfigError, match=r"benchmark.scenarios.0"):
        BenchmarkConfig.load(bench)


def test_single_trial_benchmark(tmp_path):
    reports, rows = run_benchmark(load_bench(tmp_path), tmp_path / "out")
    assert len(reports) == 1 and len(rows) == 1
    lines = (tmp_path / "out" / "trials.csv").read_text().splitlines()
    assert lines[0].split(",") == list(TrialReport.CSV_FIELDS) and len(lines) == 2
    assert (tmp_path / "out" / "summary.csv").exists() and (tmp_path / "out" / "timings.csv").exists()


def load_bench(tmp_path):
    write(tmp_path, "bare.toml", "[scenario]\nduration = 1.0\nq_start = [0.9, 0.6, 1.3, 0.8, 0, 0]\nq_goal = [-0.9, 0.6, 1.3, 0.8, 0, 0]\n[planner]\nmax_iter = 3\n")
    return write(tmp_path, "bench.toml", "[benchmark]\nscenarios = ['bare.toml']\nmethods = ['bound']\nseeds = 1\n")


def test_benchmark_output_is_reproducible(tmp_path):
    cfg = write(tmp_path, "bench.toml", "[benchmark]\nscenarios = ['arm_crossing']\nmethods = ['center']\nseeds = 2\nfirst_seed = 7\n")
    run_benchmark(cfg, tmp_path / "a")
    run_benchmark(cfg, tmp_path / "b")
    for name in ("trials.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
