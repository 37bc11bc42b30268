"""Pure numpy implementation of the pairwise ball search.

Mirrors ``_kernels.pyx`` output for output. Every pair is expressed in the
eigenbasis of its obstacle covariance, where the constrained maximizer is

    x(lam) - o = U diag(1 / (1 + lam s)) U^T (p - o)

and ``||x(lam) - o||`` is strictly decreasing in ``lam``.
"""

import numpy as np

STATUS_BOUNDARY = 0
STATUS_INTERIOR = 1
STATUS_FAILED = -1


def ball_search(centers, radius, obs, means, evecs, evals, tol=1e-9, max_iter=200):
    """Maximize each obstacle density over the ball ``||x - o|| <= R``.

    Args:
        centers: (P, 3) ball centers ``o``.
        radius: (P,) ball radii ``R`` (robot radius plus obstacle radius).
        obs: (P,) index of each pair's obstacle in the tables below.
        means: (Q, 3) obstacle means.
        evecs: (Q, 3, 3) covariance eigenvectors (columns).
        evals: (Q, 3) covariance eigenvalues, all positive.

    Returns:
        ``(m2_ball, m2_center, lam, xmax, status)``: squared Mahalanobis
        distance at the maximizer and at the center, the multiplier, the
        maximizer and a per-pair status code.
    """
    centers = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
    radius = np.ascontiguousarray(radius, dtype=np.float64).reshape(-1)
    obs = np.ascontiguousarray(obs, dtype=np.intp).reshape(-1)
    n = centers.shape[0]

    p = np.asarray(means, dtype=np.float64)[obs]
    u = np.asarray(evecs, dtype=np.float64)[obs]
    s = np.asarray(evals, dtype=np.float64)[obs]

    d = p - centers
    w = np.einsum("pji,pj->pi", u, d)
    w2 = w * w
    m2_center = np.sum(w2 / s, axis=1)
    dist = np.sqrt(np.sum(d * d, axis=1))

    lam = np.zeros(n)
    status = np.full(n, STATUS_INTERIOR, dtype=np.int8)
    xmax = p.copy()
    m2_ball = np.zeros(n)

    out = dist > radius
    if np.any(out):
        idx = np.flatnonzero(out)
        w2o, so, ro = w2[idx], s[idx], radius[idx]

        def gap(lm):
            return np.sqrt(np.sum(w2o / (1.0 + lm[:, None] * so) ** 2, axis=1)) - ro

        # dist/(1 + lam*s_max) <= |x(lam) - o| <= dist/(1 + lam*s_min) brackets the root
        excess = dist[idx] / ro - 1.0
        lo = excess / so.max(axis=1)
        hi = excess / so.min(axis=1)
        for _ in range(64):
            grow = gap(hi) > 0.0
            if not np.any(grow):
                break
            hi = np.where(grow, 2.0 * hi, hi)

        mid = 0.5 * (lo + hi)
        done = np.zeros(idx.size, dtype=bool)
        for _ in range(max_iter):
            mid = np.where(done, mid, 0.5 * (lo + hi))
            r = gap(mid)
            done |= np.abs(r) < tol
            if np.all(done):
                break
            lo = np.where(~done & (r > 0.0), mid, lo)
            hi = np.where(~done & (r <= 0.0), mid, hi)

        # Newton polish: the bisection result is within tol of the boundary,
        # where the quadratic convergence takes it to rounding level. Steps
        # that leave the bracket or do not shrink the residual are rejected.
        r = gap(mid)
        for _ in range(3):
            t = 1.0 + mid[:, None] * so
            norm = r + ro
            slope = -np.sum(w2o * so / t**3, axis=1) / norm
            cand = mid - r / np.where(slope < 0.0, slope, -1.0)
            rc = gap(cand)
            better = (slope < 0.0) & (cand >= lo) & (cand <= hi) & (np.abs(rc) < np.abs(r))
            mid = np.where(better, cand, mid)
            r = np.where(better, rc, r)
        final = r
        ok = np.abs(final) < tol
        lam[idx] = mid
        status[idx] = np.where(ok, STATUS_BOUNDARY, STATUS_FAILED)
        shrink = 1.0 + mid[:, None] * so
        y = w[idx] / shrink
        xmax[idx] = centers[idx] + np.einsum("pij,pj->pi", u[idx], y)
        m2_ball[idx] = np.sum(w2o * (mid[:, None] * so) ** 2 / (shrink**2 * so), axis=1)

    return m2_ball, m2_center, lam, xmax, status
