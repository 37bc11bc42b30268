import functools

import numpy as np
import pytest

from pcdplan.collision import GaussianSphere, RigidSphere


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_spd(rng, lo=1e-4, hi=1.0):
    u = random_rotation(rng)
    return u @ np.diag(10.0 ** rng.uniform(np.log10(lo), np.log10(hi), size=3)) @ u.T


def random_pair(rng, max_offset=3.0):
    r1, r2 = rng.uniform(0.05, 0.5, size=2)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    o = rng.uniform(-1, 1, size=3)
    mean = o + rng.uniform(0.0, max_offset) * d
    return RigidSphere(o, r1), GaussianSphere.from_moments(mean, random_spd(rng), r2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@functools.lru_cache(maxsize=4)
def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5**0.5) * i
    r = np.sqrt(1.0 - z * z)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def boundary_grid_best(center, radius, mean, precision, n=1_000_000):
    """Minimum-Mahalanobis point on a sphere from an n-point two-level grid.

    Half the points cover the whole sphere; the other half cover a small
    cap around the best coarse point, so the grid resolves the optimum to
    well below a millimetre for unit-scale spheres.
    """
    dirs = fibonacci_sphere(n // 2)
    c0 = np.asarray(center, dtype=np.float64) - mean
    root = np.linalg.cholesky(precision)
    pc = precision @ c0

    def score(d):
        return c0 @ pc + 2.0 * radius * (d @ pc) + radius**2 * np.sum((d @ root) ** 2, axis=1)

    m2 = score(dirs)
    best = dirs[np.argmin(m2)]
    cap = 4.0 * np.sqrt(4.0 * np.pi / len(dirs))
    u = np.cross(best, [1.0, 0.0, 0.0] if abs(best[0]) < 0.9 else [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(best, u)
    side = int(np.sqrt(n - n // 2))
    a, b = np.meshgrid(np.linspace(-cap, cap, side), np.linspace(-cap, cap, side))
    local = best + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v
    local /= np.linalg.norm(local, axis=1, keepdims=True)
    m2_local = score(local)
    i = int(np.argmin(m2_local))
    if m2_local[i] < m2.min():
        return center + radius * local[i], float(m2_local[i])
    return center + radius * best, float(m2.min())
