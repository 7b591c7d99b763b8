"""
dualflow-vo Core: SE(3) Geometry

Rigid-body poses stored as unit quaternion + translation, with closed-form
exponential/logarithm maps and the left-multiplicative retraction used by
every pose update.

Twists are ordered (omega, v): rotation first, translation second.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import AngleNearPi


SMALL_ANGLE = 1e-8
LOG_ANGLE_LIMIT = np.pi - 1e-6


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    wx, wy, wz = w
    return np.array([
        [0.0, -wz, wy],
        [wz, 0.0, -wx],
        [-wy, wx, 0.0],
    ])


def _quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product of (x, y, z, w) quaternions."""
    x1, y1, z1, w1 = q1
    x2, y2, z2, w2 = q2
    return np.array([
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
    ])


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit (x, y, z, w) quaternion."""
    x, y, z, w = q
    return np.array([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ])


def _frozen(a: Iterable[float]) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Twist:
    """Element of se(3): rotation vector omega (radians) and translation v."""
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", _frozen(self.omega))
        object.__setattr__(self, "v", _frozen(self.v))

    @classmethod
    def from_vector(cls, xi: Sequence[float]) -> Twist:
        """Build from a 6-vector (omega, v)."""
        xi = np.asarray(xi, dtype=np.float64)
        return cls(omega=xi[:3], v=xi[3:6])

    @classmethod
    def zero(cls) -> Twist:
        return cls(omega=np.zeros(3), v=np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_vector()))


@dataclass(frozen=True)
class PoseSE3:
    """
    Rigid transform x -> R x + t.

    Camera poses are world-to-camera (the G_t of the frame graph); the
    trajectory module converts to camera-to-world for TUM files.
    """
    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation))
        object.__setattr__(self, "translation", _frozen(self.translation))

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> PoseSE3:
        """Build from a 4x4 homogeneous matrix (or 3x4)."""
        quat = Rotation.from_matrix(T[:3, :3]).as_quat()
        return cls(rotation=quat, translation=T[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> PoseSE3:
        return cls(rotation=Rotation.from_matrix(R).as_quat(), translation=t)

    @property
    def R(self) -> np.ndarray:
        return _quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def normalized(self) -> PoseSE3:
        """Same pose with the quaternion renormalized to unit length."""
        q = self.rotation / np.linalg.norm(self.rotation)
        return PoseSE3(rotation=q, translation=self.translation)

    def compose(self, other: PoseSE3) -> PoseSE3:
        """self o other: apply other first, then self."""
        q = _quat_multiply(self.rotation, other.rotation)
        t = self.R @ other.translation + self.translation
        return PoseSE3(rotation=q / np.linalg.norm(q), translation=t)

    def __matmul__(self, other: PoseSE3) -> PoseSE3:
        return self.compose(other)

    def inverse(self) -> PoseSE3:
        q_inv = np.array([-self.rotation[0], -self.rotation[1], -self.rotation[2], self.rotation[3]])
        R_inv = _quat_to_matrix(q_inv)
        return PoseSE3(rotation=q_inv, translation=-(R_inv @ self.translation))

    def act(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        return points @ self.R.T + self.translation

    def adjoint(self) -> np.ndarray:
        """6x6 adjoint for (omega, v) twists: T exp(xi) T^-1 = exp(Ad xi)."""
        R = self.R
        Ad = np.zeros((6, 6))
        Ad[:3, :3] = R
        Ad[3:, 3:] = R
        Ad[3:, :3] = hat(self.translation) @ R
        return Ad


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a Taylor branch near zero."""
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * W
        + ((1.0 - np.cos(theta)) / theta ** 2) * (W @ W)
    )


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    """The V matrix mapping twist translation to pose translation."""
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    return (
        np.eye(3)
        + ((1.0 - np.cos(theta)) / theta ** 2) * W
        + ((theta - np.sin(theta)) / theta ** 3) * (W @ W)
    )


def so3_left_jacobian_inverse(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + (W @ W) / 12.0
    coeff = 1.0 / theta ** 2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * W + coeff * (W @ W)


def exp(xi: Twist) -> PoseSE3:
    """SE(3) exponential map."""
    omega = np.asarray(xi.omega)
    theta = float(np.linalg.norm(omega))
    if theta < SMALL_ANGLE:
        half = 0.5 * omega
        quat = np.array([half[0], half[1], half[2], 1.0])
        quat = quat / np.linalg.norm(quat)
    else:
        axis = omega / theta
        s = np.sin(0.5 * theta)
        quat = np.array([axis[0] * s, axis[1] * s, axis[2] * s, np.cos(0.5 * theta)])
    t = so3_left_jacobian(omega) @ np.asarray(xi.v)
    return PoseSE3(rotation=quat, translation=t)


def log(g: PoseSE3) -> Twist:
    """
    SE(3) logarithm, inverse of exp for rotation angles below pi - 1e-6.

    Raises:
        AngleNearPi: if the rotation angle is too close to pi
    """
    q = g.rotation / np.linalg.norm(g.rotation)
    if q[3] < 0.0:
        q = -q
    vec_norm = float(np.linalg.norm(q[:3]))
    theta = 2.0 * np.arctan2(vec_norm, q[3])
    if theta >= LOG_ANGLE_LIMIT:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
    if vec_norm < 0.5 * SMALL_ANGLE:
        omega = 2.0 * q[:3] / q[3]
    else:
        omega = (theta / vec_norm) * q[:3]
    v = so3_left_jacobian_inverse(omega) @ g.translation
    return Twist(omega=omega, v=v)


def retract(g: PoseSE3, dxi: Twist) -> PoseSE3:
    """Left retraction: exp(dxi) o g."""
    return exp(dxi).compose(g)


def relative(g_i: PoseSE3, g_j: PoseSE3) -> PoseSE3:
    """G_ij = G_j o G_i^-1, mapping camera-i coordinates to camera-j coordinates."""
    return g_j.compose(g_i.inverse())


def random_twist(rng: np.random.Generator, norm: float) -> Twist:
    """Twist with a uniformly random direction and the given norm."""
    direction = rng.normal(size=6)
    direction /= np.linalg.norm(direction)
    return Twist.from_vector(norm * direction)
