"""Rotation and pose algebra used by the error-state filter.

Quaternions follow the Hamilton convention and are stored as ``(x, y, z, w)``.
Rotation errors are *left* perturbations: ``R = exp(dtheta^) @ R_hat``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """3x3 cross-product matrix of ``v``."""
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def exp_matrix(phi) -> np.ndarray:
    """Rodrigues' formula; second-order Taylor expansion below ``SMALL_ANGLE``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.sqrt(phi @ phi)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + (np.sin(theta) / theta) * K
            + ((1.0 - np.cos(theta)) / theta ** 2) * K @ K)


def right_jacobian(phi) -> np.ndarray:
    """Right Jacobian of SO(3): ``Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.sqrt(phi @ phi)
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3) - ((1.0 - np.cos(theta)) / theta ** 2) * K
            + ((theta - np.sin(theta)) / theta ** 3) * K @ K)


def quat_multiply(q1, q2) -> np.ndarray:
    """Hamilton product ``q1 (x) q2`` for ``(x, y, z, w)`` quaternions."""
    x1, y1, z1, w1 = q1
    x2, y2, z2, w2 = q2
    return np.array([
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
    ])


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Shepperd's method; returns a unit quaternion with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s,
                      0.25 * s, (R[1, 0] - R[0, 1]) / s])
    if q[3] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


class Rotation:
    """Unit quaternion rotation with a lazily cached matrix."""

    __slots__ = ("_q", "_R")

    def __init__(self, q, *, normalize: bool = True):
        q = np.asarray(q, dtype=float)
        if q.shape != (4,):
            raise ValueError(f"quaternion must have 4 components, got {q.shape}")
        if normalize:
            n = np.linalg.norm(q)
            if not np.isfinite(n) or n == 0.0:
                raise ValueError("quaternion norm must be finite and nonzero")
            q = q / n
        self._q = q
        self._R = None

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), normalize=False)

    @classmethod
    def from_matrix(cls, R) -> "Rotation":
        rot = cls(matrix_to_quat(R))
        return rot

    @classmethod
    def exp(cls, phi) -> "Rotation":
        return so3_exp(phi)

    @property
    def quat(self) -> np.ndarray:
        return self._q.copy()

    def matrix(self) -> np.ndarray:
        if self._R is None:
            self._R = quat_to_matrix(self._q)
        return self._R

    def log(self) -> np.ndarray:
        return so3_log(self)

    def inverse(self) -> "Rotation":
        q = self._q
        return Rotation(np.array([-q[0], -q[1], -q[2], q[3]]), normalize=False)

    def __matmul__(self, other):
        if isinstance(other, Rotation):
            return Rotation(quat_multiply(self._q, other._q))
        return self.matrix() @ np.asarray(other, dtype=float)

    def boxplus(self, dtheta) -> "Rotation":
        """``exp(dtheta^) * self`` (left perturbation)."""
        return so3_exp(dtheta) @ self

    def boxminus(self, other: "Rotation") -> np.ndarray:
        """``log(self * other^-1)`` so that ``self = other.boxplus(result)``."""
        return so3_log(self @ other.inverse())

    def __repr__(self) -> str:
        return f"Rotation(xyzw={np.array2string(self._q, precision=6)})"


def so3_exp(phi) -> Rotation:
    """Exponential map from a rotation vector (radians) to a :class:`Rotation`."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (3,):
        raise ValueError(f"rotation vector must have shape (3,), got {phi.shape}")
    if not np.all(np.isfinite(phi)):
        raise ValueError("rotation vector must be finite")
    theta2 = phi @ phi
    theta = np.sqrt(theta2)
    if theta < SMALL_ANGLE:
        # second-order expansion of sin(theta/2)/theta and cos(theta/2)
        xyz = 0.5 * phi * (1.0 - theta2 / 24.0)
        w = 1.0 - theta2 / 8.0
    else:
        xyz = phi * (np.sin(0.5 * theta) / theta)
        w = np.cos(0.5 * theta)
    return Rotation(np.append(xyz, w))


def so3_log(rot: Rotation) -> np.ndarray:
    """Rotation vector with norm in ``[0, pi]``.

    At exactly pi the two antipodal vectors are equivalent; the one whose last
    nonzero component is positive is returned.
    """
    q = rot._q
    if q[3] < 0.0:
        q = -q
    xyz, w = q[:3], q[3]
    n = np.linalg.norm(xyz)
    if n < SMALL_ANGLE:
        return 2.0 * xyz / w * (1.0 - n * n / (3.0 * w * w))
    if w == 0.0:
        nz = np.flatnonzero(np.abs(xyz) > 0.0)
        if xyz[nz[-1]] < 0.0:
            xyz = -xyz
        return np.pi * xyz / n
    theta = 2.0 * np.arctan2(n, w)
    return theta * xyz / n


@dataclass
class Pose:
    """Rigid transform ``T_AB`` mapping points in ``B`` to ``A``."""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix()
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.translation + self.rotation.matrix() @ other.translation)

    def inverse(self) -> "Pose":
        inv = self.rotation.inverse()
        return Pose(inv, -(inv.matrix() @ self.translation))

    def transform(self, p) -> np.ndarray:
        return self.rotation.matrix() @ np.asarray(p, dtype=float) + self.translation

    __matmul__ = compose


@dataclass
class NavState:
    """Position, orientation and velocity of the body in the world frame."""

    t_WB: np.ndarray
    R_WB: Rotation
    v_WB: np.ndarray
    epoch: float = 0.0

    def __post_init__(self):
        self.t_WB = np.asarray(self.t_WB, dtype=float)
        self.v_WB = np.asarray(self.v_WB, dtype=float)

    def copy(self) -> "NavState":
        return NavState(self.t_WB.copy(), self.R_WB, self.v_WB.copy(), self.epoch)

    def pose(self) -> Pose:
        return Pose(self.R_WB, self.t_WB.copy())


def boxplus_nav(state: NavState, delta) -> NavState:
    """Apply a 9-vector ``(dt, dtheta, dv)`` error to a navigation state."""
    delta = np.asarray(delta, dtype=float)
    return NavState(state.t_WB + delta[0:3],
                    so3_exp(delta[3:6]) @ state.R_WB,
                    state.v_WB + delta[6:9],
                    state.epoch)


def boxminus_nav(a: NavState, b: NavState) -> np.ndarray:
    """Error ``d`` such that ``a = boxplus_nav(b, d)``."""
    return np.concatenate([a.t_WB - b.t_WB,
                           a.R_WB.boxminus(b.R_WB),
                           a.v_WB - b.v_WB])


def exp_matrices(phi) -> np.ndarray:
    """Rodrigues' formula for an ``(n, 3)`` array of rotation vectors."""
    phi = np.asarray(phi, dtype=float).reshape(-1, 3)
    theta2 = np.einsum("ni,ni->n", phi, phi)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(ts) / ts)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(ts)) / ts ** 2)
    K = skews(phi)
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def right_jacobians(phi) -> np.ndarray:
    """:func:`right_jacobian` for an ``(n, 3)`` array."""
    phi = np.asarray(phi, dtype=float).reshape(-1, 3)
    theta2 = np.einsum("ni,ni->n", phi, phi)
    theta = np.sqrt(theta2)
    small = theta < 1e-5
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(ts)) / ts ** 2)
    b = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (ts - np.sin(ts)) / ts ** 3)
    K = skews(phi)
    return np.eye(3) - a[:, None, None] * K + b[:, None, None] * (K @ K)


def skews(v) -> np.ndarray:
    """Stack of cross-product matrices for an ``(n, 3)`` array."""
    v = np.asarray(v, dtype=float).reshape(-1, 3)
    K = np.zeros((len(v), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -v[:, 2], v[:, 1]
    K[:, 1, 0], K[:, 1, 2] = v[:, 2], -v[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -v[:, 1], v[:, 0]
    return K
