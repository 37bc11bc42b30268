"""Compare the compiled and numpy ball-search backends on random sphere pairs.

    python3 benchmarks/bench_kernels.py --pairs 20000 --repeat 5
"""

import argparse
import time

import numpy as np

from pcdplan import kernels


def random_batch(n_pairs: int, n_obstacles: int, seed: int):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-1.5, 1.5, size=(n_pairs, 3))
    radius = rng.uniform(0.1, 1.0, size=n_pairs)
    obs = rng.integers(0, n_obstacles, size=n_pairs)
    means = rng.uniform(-1.5, 1.5, size=(n_obstacles, 3))
    evecs = np.linalg.qr(rng.normal(size=(n_obstacles, 3, 3)))[0]
    evals = np.sort(10.0 ** rng.uniform(-4.0, 0.0, size=(n_obstacles, 3)), axis=1)
    return centers, radius, obs, means, evecs, evals


def best_time(fn, args, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--pairs", type=int, default=20000)
    ap.add_argument("--obstacles", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    batch = random_batch(args.pairs, args.obstacles, args.seed)
    py = best_time(kernels.python_ball_search, batch, args.repeat)
    print(f"numpy   : {py * 1e6 / args.pairs:8.3f} us/pair")
    if kernels.compiled_ball_search is None:
        print("compiled: not built (run `python3 setup.py build_ext --inplace`)")
        return
    cy = best_time(kernels.compiled_ball_search, batch, args.repeat)
    print(f"compiled: {cy * 1e6 / args.pairs:8.3f} us/pair  ({py / cy:.1f}x faster)")

    a = kernels.python_ball_search(*batch)
    b = kernels.compiled_ball_search(*batch)
    diff = max(float(np.max(np.abs(x - y))) for x, y in zip(a[:4], b[:4]))
    print(f"max abs difference between backends: {diff:.2e}; status agree: {bool(np.all(a[4] == b[4]))}")


if __name__ == "__main__":
    main()
