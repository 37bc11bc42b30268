"""Bounded probabilistic collision checks and chance-constrained arm planning around Gaussian obstacles."""

from .collision import (
    METHODS,
    GaussianSphere,
    RigidSphere,
    collision_enlarged_bv,
    collision_probability_bound,
    collision_probability_center,
    collision_probability_mc,
    configuration_collision_probability,
    max_probability_point,
)
from .gaussian import Gaussian3
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "METHODS",
    "Gaussian3",
    "GaussianSphere",
    "RigidSphere",
    "collision_enlarged_bv",
    "collision_probability_bound",
    "collision_probability_center",
    "collision_probability_mc",
    "configuration_collision_probability",
    "max_probability_point",
]
