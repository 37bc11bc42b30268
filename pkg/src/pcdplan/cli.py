"""Command line entry point: ``pcdplan run | bench | oracle | scenarios``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .collision import METHODS, GaussianSphere, RigidSphere, collision_probability_bound, collision_probability_mc
from .simulator import (
    ConfigError,
    builtin_scenarios,
    data_path,
    load_scenario,
    run_benchmark,
    run_trial,
    summary_csv,
    trials_csv,
)


def random_pair(rng: np.random.Generator) -> tuple[RigidSphere, GaussianSphere]:
    """Random robot/obstacle sphere pair: radii 0.05-0.5 m, covariance eigenvalues 1e-4-1 m^2, offsets 0-3 m."""
    r1, r2 = rng.uniform(0.05, 0.5, size=2)
    evals = 10.0 ** rng.uniform(-4.0, 0.0, size=3)
    basis, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    cov = basis @ np.diag(evals) @ basis.T
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    offset = rng.uniform(0.0, 3.0) * direction
    center = rng.uniform(-1.0, 1.0, size=3)
    return RigidSphere(center, r1), GaussianSphere.from_moments(center + offset, cov, r2)


def _cmd_run(args) -> int:
    scn = load_scenario(args.scenario)
    rep = run_trial(scn, args.method, args.seed)
    text = trials_csv([rep])
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_bench(args) -> int:
    cfg = args.config
    if not Path(cfg).exists() and not cfg.endswith(".toml"):
        cfg = data_path(f"{cfg}.toml")

    def progress(rep, seconds):
        if not args.quiet:
            print(
                f"{rep.scenario} {rep.method} seed={rep.seed} collisions={rep.collisions} "
                f"duration={rep.duration:.1f}s ({seconds:.2f}s wall)",
                file=sys.stderr,
            )

    reports, rows = run_benchmark(cfg, args.out_dir, progress)
    sys.stdout.write(summary_csv(rows))
    return 0


def _cmd_oracle(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0
    for i in range(args.pairs):
        robot, obs = random_pair(rng)
        bound = collision_probability_bound(robot, obs).probability
        p, se = collision_probability_mc(robot, obs, args.samples, seed=(args.seed, i))
        ok = bound >= p - 3.0 * se
        failures += not ok
        if args.verbose or not ok:
            print(f"{i}\tbound={bound:.6g}\tmc={p:.6g}\tse={se:.2g}\t{'ok' if ok else 'VIOLATION'}")
    print(f"{args.pairs - failures}/{args.pairs} pairs with bound >= MC - 3 SE (backend: {kernels.BACKEND})")
    return 0 if failures == 0 else 1


def _cmd_scenarios(args) -> int:
    for name in builtin_scenarios():
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcdplan", description="Chance-constrained arm planning around a tracked human.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one closed-loop trial and print its CSV row")
    r.add_argument("--scenario", default="arm_crossing", help="shipped scenario name or TOML path")
    r.add_argument("--method", choices=METHODS, default="bound")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", help="write the CSV here instead of stdout")
    r.set_defaults(func=_cmd_run)

    b = sub.add_parser("bench", help="run a scenario x method x seed matrix")
    b.add_argument("--config", default="method_comparison", help="benchmark TOML path or shipped name (default: method_comparison)")
    b.add_argument("--out-dir", default="bench_out", help="directory for trials.csv, summary.csv, timings.csv")
    b.add_argument("--quiet", action="store_true", help="suppress per-trial progress on stderr")
    b.set_defaults(func=_cmd_bench)

    o = sub.add_parser("oracle", help="check the probability bound against Monte Carlo on random pairs")
    o.add_argument("--pairs", type=int, default=100)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--samples", type=int, default=100_000)
    o.add_argument("--verbose", action="store_true")
    o.set_defaults(func=_cmd_oracle)

    s = sub.add_parser("scenarios", help="list shipped scenarios")
    s.set_defaults(func=_cmd_scenarios)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"pcdplan: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
