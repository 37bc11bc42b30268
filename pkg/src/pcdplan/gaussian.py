"""3D Gaussian primitives shared by the collision, estimation and planning code."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

COV_FLOOR = 1e-12
MAX_CONDITION = 1e12
_LOG_2PI = float(np.log(2.0 * np.pi))


class CovarianceError(ValueError):
    """Covariance is not usable even after symmetrization and regularization."""


def as_vec3(v, name: str = "vector") -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got shape {np.shape(v)}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite components: {a}")
    return a


def symmetrize(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * (a + a.swapaxes(-1, -2))


def regularize(cov: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    """Symmetrize ``cov`` and add ``floor * I`` when its smallest eigenvalue is below ``floor``."""
    cov = symmetrize(cov)
    if not np.all(np.isfinite(cov)):
        raise CovarianceError("covariance has non-finite entries")
    if np.linalg.eigvalsh(cov)[0] < floor:
        cov = cov + floor * np.eye(cov.shape[-1])
    return cov


def spd3(cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (3, 3):
        raise ValueError(f"covariance must be 3x3, got {cov.shape}")
    cov = regularize(cov)
    if np.linalg.eigvalsh(cov)[0] <= 0.0:
        raise CovarianceError("covariance is not positive definite after regularization")
    return cov


@dataclass(frozen=True)
class Gaussian3:
    """Normal distribution over a 3D position.

    The covariance is symmetrized and floored on construction, so filter
    outputs with accumulated asymmetry or rank deficiency are accepted.
    """

    mean: np.ndarray
    cov: np.ndarray = field(repr=False)

    def __post_init__(self):
        mean = as_vec3(self.mean, "mean")
        raw = symmetrize(self.cov)
        cov = spd3(self.cov)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_raw_cov", raw)

    @cached_property
    def eig(self) -> tuple[np.ndarray, np.ndarray]:
        """Ascending eigenvalues and column eigenvectors of the covariance."""
        w, v = np.linalg.eigh(self.cov)
        if w[-1] / w[0] > MAX_CONDITION:
            raise CovarianceError(
                f"covariance condition number {w[-1] / w[0]:.3g} exceeds {MAX_CONDITION:.0e}"
            )
        return w, v

    @cached_property
    def precision(self) -> np.ndarray:
        w, v = self.eig
        return symmetrize((v / w) @ v.T)

    @cached_property
    def log_norm(self) -> float:
        """log of 1 / sqrt((2 pi)^3 det cov)."""
        w, _ = self.eig
        return -0.5 * (3.0 * _LOG_2PI + float(np.sum(np.log(w))))

    @cached_property
    def chol(self) -> np.ndarray:
        # Factor the covariance as given when it is positive definite, so a
        # near-zero covariance samples near the mean rather than at the floor.
        try:
            return np.linalg.cholesky(self._raw_cov)
        except np.linalg.LinAlgError:
            return np.linalg.cholesky(self.cov)

    def mahalanobis_sq(self, x) -> float:
        d = as_vec3(x, "x") - self.mean
        w, v = self.eig
        y = v.T @ d
        return float(np.sum(y * y / w))

    def log_density(self, x) -> float:
        return self.log_norm - 0.5 * self.mahalanobis_sq(x)

    def density(self, x) -> float:
        return float(np.exp(self.log_density(x)))

    def sample(self, rng_seed=None, size: int | None = None) -> np.ndarray:
        """Draw ``mean + L z`` with ``L`` the Cholesky factor; deterministic for a fixed seed."""
        rng = np.random.default_rng(rng_seed)
        if size is None:
            return self.mean + self.chol @ rng.standard_normal(3)
        return self.mean + rng.standard_normal((size, 3)) @ self.chol.T

    def transformed(self, rotation, translation) -> "Gaussian3":
        r = np.asarray(rotation, dtype=np.float64)
        return Gaussian3(r @ self.mean + as_vec3(translation), r @ self.cov @ r.T)


def density(g: Gaussian3, x) -> float:
    return g.density(x)


def mahalanobis_sq(g: Gaussian3, x) -> float:
    return g.mahalanobis_sq(x)


def sample(g: Gaussian3, rng_seed=None, size: int | None = None) -> np.ndarray:
    return g.sample(rng_seed, size)
