# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pairwise ball search; same contract as ``_pykernels.ball_search``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


cdef inline double _gap(double w0, double w1, double w2,
                        double s0, double s1, double s2,
                        double lam, double r) nogil:
    cdef double a = w0 / (1.0 + lam * s0)
    cdef double b = w1 / (1.0 + lam * s1)
    cdef double c = w2 / (1.0 + lam * s2)
    return sqrt(a * a + b * b + c * c) - r


def ball_search(centers, radius, obs, means, evecs, evals, double tol=1e-9, int max_iter=200):
    cdef const double[:, ::1] o = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
    cdef const double[::1] rad = np.ascontiguousarray(radius, dtype=np.float64).reshape(-1)
    cdef const cnp.intp_t[::1] oi = np.ascontiguousarray(obs, dtype=np.intp).reshape(-1)
    cdef const double[:, ::1] mu = np.ascontiguousarray(means, dtype=np.float64).reshape(-1, 3)
    cdef const double[:, :, ::1] U = np.ascontiguousarray(evecs, dtype=np.float64).reshape(-1, 3, 3)
    cdef const double[:, ::1] S = np.ascontiguousarray(evals, dtype=np.float64).reshape(-1, 3)

    cdef Py_ssize_t n = o.shape[0]
    m2_ball_a = np.zeros(n)
    m2_center_a = np.zeros(n)
    lam_a = np.zeros(n)
    xmax_a = np.zeros((n, 3))
    status_a = np.zeros(n, dtype=np.int8)
    cdef double[::1] m2_ball = m2_ball_a
    cdef double[::1] m2_center = m2_center_a
    cdef double[::1] lam_out = lam_a
    cdef double[:, ::1] xmax = xmax_a
    cdef signed char[::1] status = status_a

    cdef Py_ssize_t i, q, j, it
    cdef double d0, d1, d2, w0, w1, w2, s0, s1, s2, dist, R, smin, smax
    cdef double lo, hi, mid, r, y0, y1, y2, t0, t1, t2, slope, cand, rc
    cdef bint ok

    with nogil:
        for i in range(n):
            q = oi[i]
            d0 = mu[q, 0] - o[i, 0]
            d1 = mu[q, 1] - o[i, 1]
            d2 = mu[q, 2] - o[i, 2]
            w0 = U[q, 0, 0] * d0 + U[q, 1, 0] * d1 + U[q, 2, 0] * d2
            w1 = U[q, 0, 1] * d0 + U[q, 1, 1] * d1 + U[q, 2, 1] * d2
            w2 = U[q, 0, 2] * d0 + U[q, 1, 2] * d1 + U[q, 2, 2] * d2
            s0 = S[q, 0]
            s1 = S[q, 1]
            s2 = S[q, 2]
            m2_center[i] = w0 * w0 / s0 + w1 * w1 / s1 + w2 * w2 / s2
            dist = sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            R = rad[i]
            if dist <= R:
                status[i] = 1
                lam_out[i] = 0.0
                m2_ball[i] = 0.0
                xmax[i, 0] = mu[q, 0]
                xmax[i, 1] = mu[q, 1]
                xmax[i, 2] = mu[q, 2]
                continue

            # dist/(1 + lam*s_max) <= |x(lam) - o| <= dist/(1 + lam*s_min) brackets the root
            smin = s0
            smax = s0
            if s1 < smin:
                smin = s1
            if s2 < smin:
                smin = s2
            if s1 > smax:
                smax = s1
            if s2 > smax:
                smax = s2
            lo = (dist / R - 1.0) / smax
            hi = (dist / R - 1.0) / smin
            for it in range(64):
                if _gap(w0, w1, w2, s0, s1, s2, hi, R) <= 0.0:
                    break
                hi = 2.0 * hi

            mid = 0.5 * (lo + hi)
            ok = False
            for it in range(max_iter):
                mid = 0.5 * (lo + hi)
                r = _gap(w0, w1, w2, s0, s1, s2, mid, R)
                if fabs(r) < tol:
                    ok = True
                    break
                if r > 0.0:
                    lo = mid
                else:
                    hi = mid
            # Newton polish inside the bracket; see the numpy version.
            r = _gap(w0, w1, w2, s0, s1, s2, mid, R)
            for it in range(3):
                t0 = 1.0 + mid * s0
                t1 = 1.0 + mid * s1
                t2 = 1.0 + mid * s2
                slope = -(w0 * w0 * s0 / (t0 * t0 * t0) + w1 * w1 * s1 / (t1 * t1 * t1)
                          + w2 * w2 * s2 / (t2 * t2 * t2)) / (r + R)
                if not slope < 0.0:
                    break
                cand = mid - r / slope
                if cand < lo or cand > hi:
                    break
                rc = _gap(w0, w1, w2, s0, s1, s2, cand, R)
                if not fabs(rc) < fabs(r):
                    break
                mid = cand
                r = rc
            ok = fabs(r) < tol

            status[i] = 0 if ok else -1
            lam_out[i] = mid
            t0 = 1.0 + mid * s0
            t1 = 1.0 + mid * s1
            t2 = 1.0 + mid * s2
            y0 = w0 / t0
            y1 = w1 / t1
            y2 = w2 / t2
            for j in range(3):
                xmax[i, j] = o[i, j] + U[q, j, 0] * y0 + U[q, j, 1] * y1 + U[q, j, 2] * y2
            m2_ball[i] = (w0 * w0 * (mid * s0) * (mid * s0) / (t0 * t0 * s0)
                          + w1 * w1 * (mid * s1) * (mid * s1) / (t1 * t1 * s1)
                          + w2 * w2 * (mid * s2) * (mid * s2) / (t2 * t2 * s2))

    return m2_ball_a, m2_center_a, lam_a, xmax_a, status_a
