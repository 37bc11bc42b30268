"""Collision probabilities between rigid robot spheres and Gaussian obstacle spheres.

Three estimators of ``P(||X - o|| <= r1 + r2)`` for ``X ~ N(p, Sigma)``:

* ``bound``: volume of the combined sphere times the largest density inside
  it. Never below the true probability.
* ``center``: volume times the density at the robot sphere center. Cheap,
  but can under-estimate badly when the covariance is small.
* ``enlarged``: deterministic test of the confidence ellipsoid (inflated by
  the obstacle radius) against the robot sphere.

plus a Monte-Carlo estimate used as the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .gaussian import Gaussian3, as_vec3

METHODS = ("bound", "center", "enlarged")
DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 200


class ConvergenceError(RuntimeError):
    """The multiplier search did not reach the sphere boundary within its iteration budget."""


def sphere_volume(radius):
    return 4.0 * math.pi / 3.0 * np.asarray(radius, dtype=np.float64) ** 3


def chi2_3_cdf(x: float) -> float:
    """CDF of the chi-square distribution with 3 degrees of freedom.

    This is the regularized lower incomplete gamma ``P(3/2, x/2)``, which has
    an elementary closed form for half-integer shape.
    """
    if x <= 0.0:
        return 0.0
    h = math.sqrt(0.5 * x)
    return math.erf(h) - 2.0 * h * math.exp(-0.5 * x) / math.sqrt(math.pi)


def chi2_3_quantile(p: float, tol: float = 1e-12) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    lo, hi = 0.0, 1.0
    while chi2_3_cdf(hi) < p:
        hi *= 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if chi2_3_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class RigidSphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_vec3(self.center, "center"))
        if not (self.radius > 0.0 and math.isfinite(self.radius)):
            raise ValueError(f"sphere radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class GaussianSphere:
    center_dist: Gaussian3
    radius: float

    def __post_init__(self):
        if not (self.radius > 0.0 and math.isfinite(self.radius)):
            raise ValueError(f"sphere radius must be positive, got {self.radius}")

    @classmethod
    def from_moments(cls, mean, cov, radius: float) -> "GaussianSphere":
        return cls(Gaussian3(mean, cov), radius)


@dataclass(frozen=True)
class CollisionQueryResult:
    probability: float
    x_max: np.ndarray
    lam: float
    interior: bool
    log_score: float = -math.inf


def _single(robot: RigidSphere, obs: GaussianSphere, tol: float, max_iter: int):
    g = obs.center_dist
    w, v = g.eig
    out = kernels.ball_search(
        robot.center[None, :],
        np.array([robot.radius + obs.radius]),
        np.zeros(1, dtype=np.intp),
        g.mean[None, :],
        v[None, :, :],
        w[None, :],
        tol,
        max_iter,
    )
    return tuple(a[0] for a in out)


def max_probability_point(
    robot: RigidSphere, obs: GaussianSphere, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> tuple[np.ndarray, float, bool]:
    """Point of the combined sphere where the obstacle center density peaks.

    Returns ``(x_max, lam, interior)``. When the obstacle mean already lies in
    the combined sphere it is the answer and ``lam = 0``.
    """
    if not tol > 0.0:
        raise ValueError("tol must be positive")
    _, _, lam, xmax, status = _single(robot, obs, tol, max_iter)
    if status == kernels.STATUS_FAILED:
        raise ConvergenceError(f"multiplier search did not converge to tol={tol} in {max_iter} iterations")
    return np.array(xmax), float(lam), bool(status == kernels.STATUS_INTERIOR)


def collision_probability_bound(
    robot: RigidSphere, obs: GaussianSphere, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> CollisionQueryResult:
    m2, _, lam, xmax, status = _single(robot, obs, tol, max_iter)
    if status == kernels.STATUS_FAILED:
        raise ConvergenceError(f"multiplier search did not converge to tol={tol} in {max_iter} iterations")
    log_score = math.log(sphere_volume(robot.radius + obs.radius)) + obs.center_dist.log_norm - 0.5 * m2
    return CollisionQueryResult(
        probability=min(1.0, math.exp(log_score)),
        x_max=np.array(xmax),
        lam=float(lam),
        interior=bool(status == kernels.STATUS_INTERIOR),
        log_score=log_score,
    )


def collision_probability_center(robot: RigidSphere, obs: GaussianSphere) -> float:
    g = obs.center_dist
    log_score = math.log(sphere_volume(robot.radius + obs.radius)) + g.log_density(robot.center)
    return min(1.0, math.exp(log_score))


def collision_enlarged_bv(
    robot: RigidSphere, obs: GaussianSphere, confidence: float, tol: float = DEFAULT_TOL
) -> bool:
    """True when the ``confidence`` ellipsoid of the obstacle center reaches the combined sphere."""
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {confidence}")
    m2, _, _, _, status = _single(robot, obs, tol, DEFAULT_MAX_ITER)
    if status == kernels.STATUS_FAILED:
        raise ConvergenceError("multiplier search did not converge")
    return bool(m2 <= chi2_3_quantile(confidence))


def collision_probability_mc(
    robot: RigidSphere, obs: GaussianSphere, n_samples: int = 100_000, seed=0
) -> tuple[float, float]:
    """Monte-Carlo estimate of the exact overlap probability and its standard error."""
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    x = obs.center_dist.sample(seed, size=n_samples)
    r = robot.radius + obs.radius
    hits = np.count_nonzero(np.sum((x - robot.center) ** 2, axis=1) <= r * r)
    p = hits / n_samples
    return p, math.sqrt(p * (1.0 - p) / n_samples)


def pair_probability(robot: RigidSphere, obs: GaussianSphere, method: str = "bound", confidence: float = 0.99) -> float:
    if method == "bound":
        return collision_probability_bound(robot, obs).probability
    if method == "center":
        return collision_probability_center(robot, obs)
    if method == "enlarged":
        return 1.0 if collision_enlarged_bv(robot, obs, confidence) else 0.0
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def configuration_collision_probability(
    robot_spheres: Sequence[Sequence[RigidSphere]],
    obstacle_spheres: Sequence[Sequence[GaussianSphere]],
    method: str = "bound",
    confidence: float = 0.99,
) -> float:
    """Collision probability of one configuration against all obstacles.

    Spheres of the same link (or obstacle) move together, so each
    link/obstacle pair takes the largest of its sphere-pair probabilities;
    distinct pairs are combined as independent events.
    """
    free = 1.0
    for link in robot_spheres:
        for obstacle in obstacle_spheres:
            if not link or not obstacle:
                continue
            worst = max(pair_probability(b, s, method, confidence) for b in link for s in obstacle)
            free *= 1.0 - worst
    return 1.0 - free


class ObstacleTable:
    """Obstacle spheres flattened into the arrays the batch kernel consumes."""

    def __init__(self, spheres: Sequence[GaussianSphere], groups: Sequence[int]):
        if len(spheres) != len(groups):
            raise ValueError("one group id per obstacle sphere is required")
        order = np.argsort(np.asarray(groups), kind="stable")
        if np.any(order != np.arange(len(groups))):
            raise ValueError("obstacle spheres must be listed grouped by obstacle")
        self.spheres = list(spheres)
        self.groups = np.asarray(groups, dtype=np.intp)
        n = len(spheres)
        self.means = np.zeros((n, 3))
        self.evecs = np.zeros((n, 3, 3))
        self.evals = np.ones((n, 3))
        self.log_norm = np.zeros(n)
        self.radii = np.zeros(n)
        for i, s in enumerate(spheres):
            g = s.center_dist
            w, v = g.eig
            self.means[i] = g.mean
            self.evecs[i] = v
            self.evals[i] = w
            self.log_norm[i] = g.log_norm
            self.radii[i] = s.radius
        self.group_starts = np.flatnonzero(np.r_[True, self.groups[1:] != self.groups[:-1]]) if n else np.zeros(0, int)

    def __len__(self):
        return len(self.spheres)


@dataclass
class BatchScores:
    """Per sphere-pair log scores for a batch of configurations, shape (B, N, Q)."""

    log_score: np.ndarray
    probability: np.ndarray
    m2_ball: np.ndarray
    depth: np.ndarray
    grad: np.ndarray | None = None
    depth_grad: np.ndarray | None = None


def batch_scores(
    centers: np.ndarray,
    robot_radii: np.ndarray,
    tables: Sequence[ObstacleTable],
    method: str = "bound",
    confidence: float = 0.99,
    tol: float = DEFAULT_TOL,
) -> BatchScores:
    """Evaluate every robot sphere against every obstacle sphere, per configuration.

    ``centers`` is (B, N, 3) and ``tables[b]`` is the obstacle set seen by
    configuration ``b``; all tables must list the same spheres.

    ``log_score`` is the log of the unclamped pairwise value for ``bound``
    and ``center``. For ``enlarged`` it is ``log(1 - confidence)`` shifted by
    half the Mahalanobis margin to the ellipsoid, so that it crosses the
    chance threshold exactly where the deterministic test flips.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    centers = np.asarray(centers, dtype=np.float64)
    b, n, _ = centers.shape
    q = len(tables[0]) if tables else 0
    if q == 0 or n == 0:
        z = np.zeros((b, n, q))
        return BatchScores(z - np.inf, z, z, z, np.zeros((b, n, q, 3)), np.zeros((b, n, q, 3)))

    means = np.stack([t.means for t in tables])
    evecs = np.stack([t.evecs for t in tables])
    evals = np.stack([t.evals for t in tables])
    log_norm = np.stack([t.log_norm for t in tables])
    obs_r = tables[0].radii

    R = np.asarray(robot_radii, dtype=np.float64)[None, :, None] + obs_r[None, None, :]
    R = np.broadcast_to(R, (b, n, q))
    obs_idx = np.broadcast_to((np.arange(b)[:, None, None] * q + np.arange(q)[None, None, :]), (b, n, q))
    ctr = np.broadcast_to(centers[:, :, None, :], (b, n, q, 3))

    m2_ball, m2_center, lam, xmax, status = kernels.ball_search(
        ctr.reshape(-1, 3),
        R.reshape(-1),
        obs_idx.reshape(-1),
        means.reshape(-1, 3),
        evecs.reshape(-1, 3, 3),
        evals.reshape(-1, 3),
        tol,
        DEFAULT_MAX_ITER,
    )
    if np.any(status == kernels.STATUS_FAILED):
        raise ConvergenceError("multiplier search did not converge for some sphere pairs")
    m2_ball = m2_ball.reshape(b, n, q)
    m2_center = m2_center.reshape(b, n, q)
    log_v = np.log(sphere_volume(R))
    ln = log_norm[:, None, :]

    offset = means[:, None, :, :] - centers[:, :, None, :]
    dist = np.linalg.norm(offset, axis=-1)
    depth = np.maximum(R - dist, 0.0)
    depth_grad = np.where((depth > 0.0)[..., None], offset / np.where(dist > 0.0, dist, 1.0)[..., None], 0.0)

    # Gradients w.r.t. the robot sphere center: for the ball-constrained
    # term the envelope theorem gives d(-m2/2)/do = lam * (x_max - o).
    if method == "center":
        w = np.einsum("bqji,bnqj->bnqi", evecs, offset) / evals[:, None, :, :]
        grad = np.einsum("bqij,bnqj->bnqi", evecs, w)
    else:
        grad = lam.reshape(b, n, q)[..., None] * (xmax.reshape(b, n, q, 3) - centers[:, :, None, :])

    if method == "bound":
        log_score = log_v + ln - 0.5 * m2_ball
        prob = np.minimum(1.0, np.exp(log_score))
    elif method == "center":
        log_score = log_v + ln - 0.5 * m2_center
        prob = np.minimum(1.0, np.exp(log_score))
    else:
        quant = chi2_3_quantile(confidence)
        log_score = math.log(1.0 - confidence) + 0.5 * (quant - m2_ball)
        prob = (m2_ball <= quant).astype(np.float64)
    return BatchScores(log_score, prob, m2_ball, depth, grad, depth_grad)


def aggregate(pair_values: np.ndarray, link_starts: np.ndarray, group_starts: np.ndarray, reduce=np.maximum):
    """Reduce (B, N, Q) pair values to (B, J, L) link/obstacle values."""
    per_link = reduce.reduceat(pair_values, link_starts, axis=1)
    return reduce.reduceat(per_link, group_starts, axis=2)


def combine_independent(link_obstacle_probs: np.ndarray) -> np.ndarray:
    """``1 - prod(1 - P_jl)`` over the trailing two axes."""
    b = link_obstacle_probs.shape[0]
    return 1.0 - np.prod(1.0 - link_obstacle_probs.reshape(b, -1), axis=1)
