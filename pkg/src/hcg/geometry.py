"""Rigid transforms, gripper points and the point-matching pose loss.

Convention: a gripper pose ``T`` maps base-frame coordinates into the gripper
frame (``p_gripper = R @ p_base + t``).  With this convention

* ``relative(T_a, T_b) = T_b @ inv(T_a)`` maps points expressed in gripper
  frame ``a`` into gripper frame ``b``;
* the expert action ``relative(plan[t], plan[t + 1])`` is the motion expressed
  with respect to the current gripper frame, and ``compose(action, T)`` gives the
  next pose.

Planar helpers convert between ``T`` and the palm configuration ``(x, y, yaw)``
in the base frame.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-9
LOG_SINGULAR_MARGIN = 1e-6

# palm, fingertips, knuckles (meters, gripper frame)
GRIPPER_POINTS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.04, 0.0, 0.10],
        [-0.04, 0.0, 0.10],
        [0.04, 0.0, 0.06],
        [-0.04, 0.0, 0.06],
    ]
)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        r = self.rotation
        ortho = np.abs(r.T @ r - np.eye(3)).max()
        return bool(ortho <= tol and abs(np.linalg.det(r) - 1.0) <= tol)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_bytes(self) -> bytes:
        """12 little-endian float64: row-major rotation then translation."""
        vals = list(self.rotation.reshape(-1)) + list(self.translation)
        return struct.pack("<12d", *vals)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Pose":
        vals = struct.unpack("<12d", buf[:96])
        return cls(np.array(vals[:9]).reshape(3, 3), np.array(vals[9:]))

    def to_list(self) -> list[float]:
        return [float(v) for v in self.rotation.reshape(-1)] + [float(v) for v in self.translation]

    @classmethod
    def from_list(cls, vals: Sequence[float]) -> "Pose":
        vals = list(vals)
        if len(vals) != 12:
            raise GeometryError(f"pose needs 12 values, got {len(vals)}")
        return cls(np.array(vals[:9]).reshape(3, 3), np.array(vals[9:]))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self):
        return f"Pose(t={np.round(self.translation, 6).tolist()}, R={np.round(self.rotation, 6).tolist()})"


def identity() -> Pose:
    return Pose(np.eye(3), np.zeros(3))


def translate(x: float, y: float, z: float) -> Pose:
    return Pose(np.eye(3), np.array([x, y, z], dtype=np.float64))


def rotz(theta: float) -> Pose:
    c, s = math.cos(theta), math.sin(theta)
    return Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.zeros(3))


def compose(a: Pose, b: Pose) -> Pose:
    """Apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def relative(frm: Pose, to: Pose) -> Pose:
    """The pose ``X`` with ``compose(X, frm) == to``."""
    return compose(to, inverse(frm))


def transform_points(T: Pose, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ T.rotation.T + T.translation


def pose_loss(t1: Pose, t2: Pose, xg=GRIPPER_POINTS) -> float:
    """Mean L1 displacement of the gripper points under two transforms."""
    xg = np.asarray(xg, dtype=np.float64)
    if len(xg) == 0:
        raise GeometryError("gripper point set is empty")
    d = transform_points(t1, xg) - transform_points(t2, xg)
    return float(np.abs(d).sum(axis=1).mean())


def skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def exp_map(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=np.float64).reshape(3)
    theta2 = float(w @ w)
    theta = math.sqrt(theta2)
    if theta < 1e-4:
        # Taylor terms up to theta^4
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    k = skew(w)
    return np.eye(3) + a * k + b * (k @ k)


def log_map(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos_t = min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0))
    theta = math.acos(cos_t)
    if theta >= math.pi - LOG_SINGULAR_MARGIN:
        raise GeometryError(f"log_map near-singular: rotation angle {theta:.9f} ~ pi")
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-4:
        return 0.5 * (1.0 + theta * theta / 6.0) * v
    return theta / (2.0 * math.sin(theta)) * v


def pose_from_vectors(translation, omega) -> Pose:
    """Relative pose from a translation 3-vector and an axis-angle 3-vector."""
    return Pose(exp_map(omega), np.asarray(translation, dtype=np.float64))


def extract_expert_action(plan: Sequence[Pose], t: int) -> Pose:
    if t < 0 or t >= len(plan) - 1:
        raise IndexError(f"action index {t} out of range for plan of length {len(plan)}")
    return relative(plan[t], plan[t + 1])


def extract_expert_goal(plan: Sequence[Pose], t: int) -> Pose:
    if t < 0 or t > len(plan) - 1:
        raise IndexError(f"goal index {t} out of range for plan of length {len(plan)}")
    return relative(plan[t], plan[-1])


# -- planar helpers ---------------------------------------------------------


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def planar_pose(x: float, y: float, yaw: float) -> Pose:
    """Gripper pose for a palm at ``(x, y)`` heading ``yaw`` (base frame)."""
    c, s = math.cos(yaw), math.sin(yaw)
    r_world = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose(r_world.T, -r_world.T @ np.array([x, y, 0.0]))


def planar_config(T: Pose) -> np.ndarray:
    """``(x, y, yaw)`` of the palm in the base frame."""
    r_world = T.rotation.T
    p = -r_world @ T.translation
    yaw = math.atan2(r_world[1, 0], r_world[0, 0])
    return np.array([p[0], p[1], yaw])


def project_planar(T: Pose) -> Pose:
    """Closest pose satisfying z = 0 and a yaw-only rotation."""
    yaw = math.atan2(T.rotation[1, 0], T.rotation[0, 0])
    rz = rotz(yaw).rotation
    return Pose(rz, np.array([T.translation[0], T.translation[1], 0.0]))


def is_planar(T: Pose, tol: float = 1e-9) -> bool:
    r = T.rotation
    return bool(
        abs(T.translation[2]) <= tol
        and abs(r[2, 2] - 1.0) <= tol
        and np.abs(r[2, :2]).max() <= tol
        and np.abs(r[:2, 2]).max() <= tol
    )


def yaw_of(T: Pose) -> float:
    return math.atan2(T.rotation[1, 0], T.rotation[0, 0])
