"""Serial-chain revolute arms with bounding spheres along each link."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .collision import RigidSphere


def rotation(axis, angle) -> np.ndarray:
    """Rodrigues rotation about a unit ``axis``; ``angle`` may be an array (batched)."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    k = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def translation(x=0.0, y=0.0, z=0.0) -> np.ndarray:
    t = np.eye(4)
    t[:3, 3] = (x, y, z)
    return t


@dataclass(frozen=True)
class JointSpec:
    axis: tuple = (0.0, 0.0, 1.0)
    origin: np.ndarray = field(default_factory=lambda: np.eye(4))
    limits: tuple = (-math.pi, math.pi)

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if not n > 0.0:
            raise ValueError("joint axis must be non-zero")
        if not abs(n - 1.0) < 1e-9:
            raise ValueError(f"joint axis must be unit length, got norm {n}")
        origin = np.asarray(self.origin, dtype=np.float64)
        if origin.shape != (4, 4):
            raise ValueError("joint origin must be a 4x4 homogeneous transform")
        lo, hi = self.limits
        if not lo < hi:
            raise ValueError(f"joint limits must satisfy lo < hi, got {self.limits}")
        object.__setattr__(self, "axis", tuple(axis))
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "limits", (float(lo), float(hi)))


@dataclass(frozen=True)
class LinkSpec:
    """A capsule-shaped link covered by ``sphere_count`` equal spheres.

    The link's central segment starts at the frame of ``joint`` and extends
    ``length`` along ``direction``. Spheres sit at the midpoints of ``K``
    equal sub-segments, so ``sphere_radius >= length / (2K)`` keeps the
    segment itself covered.
    """

    joint: int
    length: float
    sphere_count: int = 1
    sphere_radius: float = 0.05
    direction: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.length < 0.0:
            raise ValueError("link length must be non-negative")
        if self.sphere_count < 1:
            raise ValueError("a link needs at least one sphere")
        if not self.sphere_radius > 0.0:
            raise ValueError("sphere radius must be positive")
        if self.sphere_radius < self.length / (2 * self.sphere_count) - 1e-12:
            raise ValueError(
                f"sphere radius {self.sphere_radius} leaves gaps: need >= {self.length / (2 * self.sphere_count)}"
            )
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "direction", tuple(d / np.linalg.norm(d)))

    @property
    def capsule_radius(self) -> float:
        """Radius of the largest capsule around the segment that the spheres fully enclose."""
        return self.sphere_radius - self.length / (2 * self.sphere_count)

    def local_centers(self) -> np.ndarray:
        k = np.arange(self.sphere_count)
        t = (k + 0.5) / self.sphere_count * self.length
        return t[:, None] * np.asarray(self.direction)[None, :]


class RobotModel:
    def __init__(self, joints: Sequence[JointSpec], links: Sequence[LinkSpec], base=None, name: str = "robot"):
        self.name = name
        self.joints = tuple(joints)
        self.links = tuple(links)
        self.base = np.eye(4) if base is None else np.asarray(base, dtype=np.float64)
        if len(self.links) > len(self.joints):
            raise ValueError("a robot cannot have more links than joints")
        for ln in self.links:
            if not 0 <= ln.joint < len(self.joints):
                raise ValueError(f"link attached to missing joint {ln.joint}")

        self.lower = np.array([j.limits[0] for j in self.joints])
        self.upper = np.array([j.limits[1] for j in self.joints])
        centers, radii, link_ids, joint_ids = [], [], [], []
        for i, ln in enumerate(self.links):
            c = ln.local_centers()
            centers.append(c)
            radii += [ln.sphere_radius] * len(c)
            link_ids += [i] * len(c)
            joint_ids += [ln.joint] * len(c)
        self._local = np.vstack(centers) if centers else np.zeros((0, 3))
        self.sphere_radii = np.asarray(radii, dtype=np.float64)
        self.sphere_link = np.asarray(link_ids, dtype=np.intp)
        self.sphere_joint = np.asarray(joint_ids, dtype=np.intp)
        self.link_starts = np.flatnonzero(np.r_[True, self.sphere_link[1:] != self.sphere_link[:-1]])

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def n_spheres(self) -> int:
        return len(self.sphere_radii)

    def _check(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        if q.shape[-1] != self.dof:
            raise ValueError(f"configuration has {q.shape[-1]} values, robot has {self.dof} joints")
        return q

    def within_limits(self, q, tol: float = 1e-12) -> bool:
        q = self._check(q)
        return bool(np.all(q >= self.lower - tol) and np.all(q <= self.upper + tol))

    def clamp(self, q) -> np.ndarray:
        return np.clip(self._check(q), self.lower, self.upper)

    def forward_kinematics(self, q) -> np.ndarray:
        """World transforms of every joint frame; (..., D, 4, 4) for q of shape (..., D)."""
        q = self._check(q)
        batch = q.shape[:-1]
        t = np.broadcast_to(self.base, batch + (4, 4)).copy()
        frames = np.empty(batch + (self.dof, 4, 4))
        for i, j in enumerate(self.joints):
            t = t @ j.origin
            r = np.zeros(batch + (4, 4))
            r[..., :3, :3] = rotation(j.axis, q[..., i])
            r[..., 3, 3] = 1.0
            t = t @ r
            frames[..., i, :, :] = t
        return frames

    def sphere_centers(self, q, frames=None) -> np.ndarray:
        """World sphere centers, (..., N, 3)."""
        if frames is None:
            frames = self.forward_kinematics(q)
        f = frames[..., self.sphere_joint, :, :]
        return np.einsum("...nij,nj->...ni", f[..., :3, :3], self._local) + f[..., :3, 3]

    def link_spheres(self, q) -> list[list[RigidSphere]]:
        """Spheres grouped by link, as collision-module objects."""
        c = self.sphere_centers(q)
        out = [[] for _ in self.links]
        for i, (ctr, r) in enumerate(zip(c, self.sphere_radii)):
            out[self.sphere_link[i]].append(RigidSphere(ctr, float(r)))
        return out

    def sphere_jacobians(self, q, frames=None) -> np.ndarray:
        """d(center)/dq for every sphere, (..., N, 3, D)."""
        if frames is None:
            frames = self.forward_kinematics(q)
        centers = self.sphere_centers(q, frames)
        axes_local = np.array([j.axis for j in self.joints])
        axes = np.einsum("...dij,dj->...di", frames[..., :3, :3], axes_local)
        origins = frames[..., :3, 3]
        lever = centers[..., :, None, :] - origins[..., None, :, :]
        jac = np.cross(axes[..., None, :, :], lever)
        mask = (np.arange(self.dof)[None, :] <= self.sphere_joint[:, None]).astype(np.float64)
        return np.swapaxes(jac * mask[..., None], -1, -2)

    def end_effector(self, q) -> np.ndarray:
        """Tip of the last link's segment."""
        frames = self.forward_kinematics(q)
        ln = self.links[-1]
        f = frames[..., ln.joint, :, :]
        tip = ln.length * np.asarray(ln.direction)
        return np.einsum("...ij,j->...i", f[..., :3, :3], tip) + f[..., :3, 3]

    def transformed(self, transform) -> "RobotModel":
        return RobotModel(self.joints, self.links, np.asarray(transform) @ self.base, self.name)


def workspace_length(model: RobotModel, path: np.ndarray) -> float:
    """Polyline length of the end-effector through a sequence of configurations."""
    ee = model.end_effector(np.asarray(path))
    return float(np.sum(np.linalg.norm(np.diff(ee, axis=0), axis=1)))


_X, _Y, _Z = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)


def tabletop6() -> RobotModel:
    """6-joint arm loosely sized like a small tabletop manipulator."""
    lim = (-math.pi, math.pi)
    joints = [
        JointSpec(_Z, translation(), lim),
        JointSpec(_Y, translation(0, 0, 0.15), lim),
        JointSpec(_Y, translation(0, 0, 0.35), lim),
        JointSpec(_Y, translation(0, 0, 0.30), lim),
        JointSpec(_Z, translation(0, 0, 0.10), lim),
        JointSpec(_Y, translation(0, 0, 0.06), lim),
    ]
    links = [
        LinkSpec(0, 0.15, 2, 0.06, _Z),
        LinkSpec(1, 0.35, 4, 0.065, _Z),
        LinkSpec(2, 0.30, 4, 0.055, _Z),
        LinkSpec(3, 0.10, 1, 0.055, _Z),
        LinkSpec(5, 0.06, 1, 0.045, _Z),
    ]
    return RobotModel(joints, links, name="tabletop6")


def tabletop7() -> RobotModel:
    """7-joint arm with alternating roll/pitch joints."""
    lim = (-math.pi, math.pi)
    joints = [
        JointSpec(_Z, translation(), lim),
        JointSpec(_Y, translation(0, 0, 0.17), lim),
        JointSpec(_Z, translation(0, 0, 0.20), lim),
        JointSpec(_Y, translation(0, 0, 0.20), lim),
        JointSpec(_Z, translation(0, 0, 0.20), lim),
        JointSpec(_Y, translation(0, 0, 0.20), lim),
        JointSpec(_Z, translation(0, 0, 0.08), lim),
    ]
    links = [
        LinkSpec(0, 0.17, 2, 0.065, _Z),
        LinkSpec(2, 0.20, 2, 0.06, _Z),
        LinkSpec(3, 0.20, 2, 0.06, _Z),
        LinkSpec(4, 0.20, 2, 0.055, _Z),
        LinkSpec(5, 0.08, 1, 0.05, _Z),
        LinkSpec(6, 0.06, 1, 0.04, _Z),
    ]
    return RobotModel(joints, links, name="tabletop7")


BUILTIN_ROBOTS = {"tabletop6": tabletop6, "tabletop7": tabletop7}


def robot_from_config(cfg: dict) -> RobotModel:
    """Build a model from a parsed config table.

    Either ``{"builtin": "tabletop6"}`` or explicit ``joints`` and ``links``
    arrays of tables; each joint has ``axis``, ``offset`` (translation from
    the parent frame) and optional ``limits``.
    """
    if "builtin" in cfg:
        name = cfg["builtin"]
        if name not in BUILTIN_ROBOTS:
            raise ValueError(f"robot.builtin: unknown robot {name!r}; choose from {sorted(BUILTIN_ROBOTS)}")
        model = BUILTIN_ROBOTS[name]()
    else:
        joints = []
        for i, j in enumerate(cfg.get("joints", [])):
            try:
                joints.append(
                    JointSpec(
                        tuple(j["axis"]),
                        translation(*j.get("offset", (0.0, 0.0, 0.0))),
                        tuple(j.get("limits", (-math.pi, math.pi))),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"robot.joints[{i}]: {exc}") from exc
        links = []
        for i, ln in enumerate(cfg.get("links", [])):
            try:
                links.append(
                    LinkSpec(
                        int(ln["joint"]),
                        float(ln["length"]),
                        int(ln.get("spheres", 1)),
                        float(ln["radius"]),
                        tuple(ln.get("direction", _Z)),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"robot.links[{i}]: {exc}") from exc
        if not joints:
            raise ValueError("robot: needs 'builtin' or a non-empty 'joints' array")
        model = RobotModel(joints, links, name=cfg.get("name", "custom"))
    if "base" in cfg:
        model = model.transformed(translation(*cfg["base"]))
    return model
