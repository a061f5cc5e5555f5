"""Pinhole radial-tangential camera with time delay and rolling-shutter readout.

Landmarks are either homogeneous world points or anchored inverse-depth (AID)
points ``[alpha, beta, 1, rho] / rho`` expressed in an anchor camera frame.
All projections work on homogeneous 3-vectors so ``rho = 0`` (a point at
infinity) needs no special casing.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .manifold import Pose, Rotation, skew, skews

MIN_DEPTH = 1e-8
INTRINSIC_NAMES = ("fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2")


class BehindCameraError(ValueError):
    """The point does not lie in front of the camera."""


@dataclass
class CameraIntrinsics:
    fx: float = 350.0
    fy: float = 360.0
    cx: float = 378.0
    cy: float = 238.0
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    width: int = 752
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    def vector(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.k1, self.k2, self.p1, self.p2])

    def with_vector(self, vec) -> "CameraIntrinsics":
        return CameraIntrinsics(*[float(x) for x in vec], width=self.width, height=self.height)

    def in_image(self, uv, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv)
        return ((uv[..., 0] >= margin) & (uv[..., 0] <= self.width - 1 - margin)
                & (uv[..., 1] >= margin) & (uv[..., 1] <= self.height - 1 - margin))


class ExtrinsicKind(str, enum.Enum):
    MAIN_CAMERA_CENTRIC = "main_camera_centric"   # t_C0B free, R_C0B constant
    FULL_POSE = "full_pose"                       # T_BC
    RELATIVE_TO_MAIN = "relative_to_main"         # T_C0Ck


@dataclass
class CameraExtrinsics:
    """Extrinsic parameters in the parameterization given by ``kind``.

    ``rotation``/``translation`` hold ``R_C0B, t_C0B`` for the camera-centric
    main camera, ``R_BC, t_BC`` for a full pose and ``R_C0Ck, t_C0Ck`` for a
    camera expressed relative to the main camera.
    """

    kind: ExtrinsicKind = ExtrinsicKind.FULL_POSE
    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.kind = ExtrinsicKind(self.kind)
        self.translation = np.asarray(self.translation, dtype=float).copy()

    @property
    def dim(self) -> int:
        return 3 if self.kind is ExtrinsicKind.MAIN_CAMERA_CENTRIC else 6

    def boxplus(self, delta) -> "CameraExtrinsics":
        delta = np.asarray(delta, dtype=float)
        if self.kind is ExtrinsicKind.MAIN_CAMERA_CENTRIC:
            return CameraExtrinsics(self.kind, self.rotation, self.translation + delta[:3])
        return CameraExtrinsics(self.kind, self.rotation.boxplus(delta[3:6]),
                                self.translation + delta[:3])


@dataclass
class CameraTemporal:
    t_d: float = 0.0    # s, raw camera stamp + t_d = IMU-clock mid-row epoch
    t_r: float = 0.0    # s, frame readout time

    def __post_init__(self):
        if self.t_r < 0.0:
            raise ValueError("readout time must be non-negative")
        if abs(self.t_d) >= 1.0:
            raise ValueError("time delay magnitude must be below 1 s")


@dataclass
class CameraParams:
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    extrinsics: CameraExtrinsics = field(default_factory=CameraExtrinsics)
    temporal: CameraTemporal = field(default_factory=CameraTemporal)

    @property
    def dim(self) -> int:
        """Error-state size: extrinsics, 8 intrinsics, t_d, t_r."""
        return self.extrinsics.dim + 10

    def vector(self) -> np.ndarray:
        return np.concatenate([self.extrinsics.translation, self.intrinsics.vector(),
                               [self.temporal.t_d, self.temporal.t_r]])

    def boxplus(self, delta) -> "CameraParams":
        delta = np.asarray(delta, dtype=float)
        ne = self.extrinsics.dim
        return CameraParams(
            self.intrinsics.with_vector(self.intrinsics.vector() + delta[ne:ne + 8]),
            self.extrinsics.boxplus(delta[:ne]),
            CameraTemporal(self.temporal.t_d + delta[ne + 8],
                           max(self.temporal.t_r + delta[ne + 9], 0.0)))

    def copy(self) -> "CameraParams":
        return self.boxplus(np.zeros(self.dim))


# --------------------------------------------------------------------------
# projection

def distort(intr: CameraIntrinsics, xy):
    """Apply radial-tangential distortion to normalized coordinates."""
    xy = np.asarray(xy, dtype=float)
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    rad = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    xd = x * rad + 2.0 * intr.p1 * x * y + intr.p2 * (r2 + 2.0 * x * x)
    yd = y * rad + intr.p1 * (r2 + 2.0 * y * y) + 2.0 * intr.p2 * x * y
    return np.stack([xd, yd], axis=-1)


def _distort_jacobian(intr, x, y):
    r2 = x * x + y * y
    rad = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    drad = intr.k1 + 2.0 * intr.k2 * r2
    J = np.array([
        [rad + 2 * x * x * drad + 2 * intr.p1 * y + 6 * intr.p2 * x,
         2 * x * y * drad + 2 * intr.p1 * x + 2 * intr.p2 * y],
        [2 * x * y * drad + 2 * intr.p1 * x + 2 * intr.p2 * y,
         rad + 2 * y * y * drad + 6 * intr.p1 * y + 2 * intr.p2 * x],
    ])
    return J


def project(intr: CameraIntrinsics, point_in_camera) -> np.ndarray:
    """Pixel coordinates of a camera-frame point (or ``(n, 3)`` array of points)."""
    p = np.asarray(point_in_camera, dtype=float)
    z = p[..., 2]
    if np.any(~(z > MIN_DEPTH)):
        raise BehindCameraError("point is behind the camera")
    xy = p[..., :2] / z[..., None]
    d = distort(intr, xy)
    return np.stack([intr.fx * d[..., 0] + intr.cx, intr.fy * d[..., 1] + intr.cy], axis=-1)


def project_jacobian(intr: CameraIntrinsics, c):
    """Pixel, d pixel / d c (2x3) and d pixel / d intrinsics (2x8).

    ``c`` may be any positive multiple of the camera-frame point.
    """
    c = np.asarray(c, dtype=float)
    if not c[2] > MIN_DEPTH * max(1.0, abs(c[0]), abs(c[1])):
        raise BehindCameraError("point is behind the camera")
    iz = 1.0 / c[2]
    x, y = c[0] * iz, c[1] * iz
    r2 = x * x + y * y
    rad = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    xd = x * rad + 2.0 * intr.p1 * x * y + intr.p2 * (r2 + 2.0 * x * x)
    yd = y * rad + intr.p1 * (r2 + 2.0 * y * y) + 2.0 * intr.p2 * x * y
    uv = np.array([intr.fx * xd + intr.cx, intr.fy * yd + intr.cy])
    Jd = _distort_jacobian(intr, x, y)
    Jn = np.array([[iz, 0.0, -x * iz], [0.0, iz, -y * iz]])
    Jc = np.diag([intr.fx, intr.fy]) @ Jd @ Jn
    Ji = np.array([
        [xd, 0.0, 1.0, 0.0, intr.fx * x * r2, intr.fx * x * r2 * r2,
         intr.fx * 2 * x * y, intr.fx * (r2 + 2 * x * x)],
        [0.0, yd, 0.0, 1.0, intr.fy * y * r2, intr.fy * y * r2 * r2,
         intr.fy * (r2 + 2 * y * y), intr.fy * 2 * x * y],
    ])
    return uv, Jc, Ji


def undistort(intr: CameraIntrinsics, uv, iterations: int = 20) -> np.ndarray:
    """Normalized coordinates of a pixel, by Gauss-Newton on the distortion model."""
    uv = np.asarray(uv, dtype=float)
    target = np.array([(uv[0] - intr.cx) / intr.fx, (uv[1] - intr.cy) / intr.fy])
    xy = target.copy()
    for _ in range(iterations):
        r = distort(intr, xy) - target
        if np.abs(r).max() < 1e-15:
            break
        xy = xy - np.linalg.solve(_distort_jacobian(intr, xy[0], xy[1]), r)
    return xy


def observation_epoch(temporal: CameraTemporal, raw_stamp: float, v: float, h: float) -> float:
    """IMU-clock epoch at which image row ``v`` of an ``h``-row image was exposed."""
    return raw_stamp + temporal.t_d + ((v - 0.5 * h) / h) * temporal.t_r


# --------------------------------------------------------------------------
# extrinsic chains

def body_camera_transform(cams, k: int):
    """``(R_BCk, t_BCk)`` for camera ``k`` of the rig ``cams``."""
    ext = cams[k].extrinsics
    if ext.kind is ExtrinsicKind.MAIN_CAMERA_CENTRIC:
        R_BC = ext.rotation.matrix().T
        return R_BC, -R_BC @ ext.translation
    if ext.kind is ExtrinsicKind.FULL_POSE:
        return ext.rotation.matrix(), ext.translation
    if k == 0:
        raise ValueError("the main camera cannot be relative to itself")
    R_B0, t_B0 = body_camera_transform(cams, 0)
    return R_B0 @ ext.rotation.matrix(), R_B0 @ ext.translation + t_B0


def extrinsic_jacobian(cams, k: int) -> dict[int, np.ndarray]:
    """Map from each camera's extrinsic error to ``(dt_BCk, dtheta_BCk)`` (6 x dim)."""
    ext = cams[k].extrinsics
    if ext.kind is ExtrinsicKind.MAIN_CAMERA_CENTRIC:
        R_BC, _ = body_camera_transform(cams, k)
        M = np.zeros((6, 3))
        M[0:3] = -R_BC
        return {k: M}
    if ext.kind is ExtrinsicKind.FULL_POSE:
        return {k: np.eye(6)}
    R_B0, _ = body_camera_transform(cams, 0)
    own = np.zeros((6, 6))
    own[0:3, 0:3] = R_B0
    own[3:6, 3:6] = R_B0
    out = {k: own}
    main = extrinsic_jacobian(cams, 0)[0]
    # T_BCk = T_BC0 T_C0Ck: translation and rotation errors of T_BC0 carry over
    chain = np.eye(6)
    chain[0:3, 3:6] = -skew(R_B0 @ ext.translation)
    out[0] = chain @ main
    return out


# --------------------------------------------------------------------------
# landmarks

@dataclass
class HomogeneousPoint:
    """World point ``[x, y, z, w]`` with ``w >= 0``."""

    xyzw: np.ndarray

    def __post_init__(self):
        self.xyzw = np.asarray(self.xyzw, dtype=float)
        if self.xyzw[3] < 0:
            raise ValueError("homogeneous weight must be non-negative")


@dataclass
class AnchoredInverseDepth:
    alpha: float
    beta: float
    rho: float
    anchor_frame: int = -1
    anchor_cam: int = 0

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("inverse depth must be non-negative")

    @property
    def at_infinity(self) -> bool:
        return self.rho == 0.0

    def vector(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.rho])

    def to_world(self, T_WB_anchor: Pose, R_BC, t_BC) -> HomogeneousPoint:
        f = np.array([self.alpha, self.beta, 1.0])
        R_a = T_WB_anchor.rotation.matrix()
        q = R_a @ (R_BC @ f + self.rho * t_BC) + self.rho * T_WB_anchor.translation
        return HomogeneousPoint(np.append(q, self.rho))


def aid_from_world(p_W, T_WB_anchor: Pose, R_BC, t_BC, anchor_frame=-1, anchor_cam=0):
    p_B = T_WB_anchor.rotation.matrix().T @ (np.asarray(p_W, dtype=float) - T_WB_anchor.translation)
    c = R_BC.T @ (p_B - t_BC)
    if not c[2] > MIN_DEPTH:
        raise BehindCameraError("landmark is behind the anchor camera")
    return AnchoredInverseDepth(c[0] / c[2], c[1] / c[2], 1.0 / c[2], anchor_frame, anchor_cam)


def reproject(landmark, T_WB_obs: Pose, R_BC, t_BC, intr: CameraIntrinsics,
              T_WB_anchor: Pose | None = None, R_BC_anchor=None, t_BC_anchor=None) -> np.ndarray:
    """Predicted pixel of a landmark seen by a camera at body pose ``T_WB_obs``."""
    if isinstance(landmark, AnchoredInverseDepth):
        if T_WB_anchor is None:
            raise ValueError("anchored landmarks need the anchor body pose")
        if R_BC_anchor is None:
            R_BC_anchor, t_BC_anchor = R_BC, t_BC
        landmark = landmark.to_world(T_WB_anchor, R_BC_anchor, t_BC_anchor)
    h = landmark.xyzw
    R_o = T_WB_obs.rotation.matrix()
    c = R_BC.T @ (R_o.T @ (h[:3] - h[3] * T_WB_obs.translation) - h[3] * t_BC)
    if not c[2] > MIN_DEPTH:
        raise BehindCameraError("landmark is behind the camera")
    return project(intr, c)


@dataclass
class ObservationGeometry:
    """Everything needed to predict one observation of an AID landmark.

    ``p_obs, R_obs`` describe the body at the observation epoch, obtained by
    propagating the owning clone ``(p_clone, v_clone)`` over ``tau`` seconds;
    ``p_rate`` and ``theta_rate`` are the time derivatives of that propagated
    position and (world-frame) orientation.  ``row_coeff`` is ``(v - h/2) / h``
    of the measured row.
    """

    p_obs: np.ndarray
    R_obs: np.ndarray
    p_rate: np.ndarray
    theta_rate: np.ndarray
    p_clone: np.ndarray
    v_clone: np.ndarray
    tau: float
    p_anchor: np.ndarray
    R_anchor: np.ndarray
    R_BC: np.ndarray
    t_BC: np.ndarray
    R_BC_anchor: np.ndarray
    t_BC_anchor: np.ndarray
    row_coeff: float
    gravity: float = 9.80665


def measurement_jacobian(lm_params, geo: ObservationGeometry, intr: CameraIntrinsics):
    """Predicted pixel and Jacobian blocks of one AID observation.

    Returns ``(uv, blocks)`` where ``blocks`` has 2-row matrices for
    ``clone`` (dt, dtheta, dv of the owning clone), ``anchor`` (dt, dtheta, dv
    of the anchor clone), ``T_BC`` and ``T_BC_anchor`` (dt, dtheta of the body-
    camera transforms), ``intrinsics``, ``t_d``, ``t_r`` and ``landmark``
    (alpha, beta, rho).  Raises :class:`BehindCameraError`.
    """
    alpha, beta, rho = lm_params
    f = np.array([alpha, beta, 1.0])
    R_a, p_a = geo.R_anchor, geo.p_anchor
    Rbf = geo.R_BC_anchor @ f
    q = R_a @ (Rbf + rho * geo.t_BC_anchor) + rho * p_a
    A = geo.R_BC.T @ geo.R_obs.T
    qo = q - rho * geo.p_obs
    d = geo.R_obs.T @ qo
    c = geo.R_BC.T @ (d - rho * geo.t_BC)
    uv, Jc, Ji = project_jacobian(intr, c)

    g = np.array([0.0, 0.0, -geo.gravity])
    tau = geo.tau
    s = geo.p_obs - geo.p_clone - geo.v_clone * tau - 0.5 * g * tau * tau
    dc_dth_obs = A @ skew(qo)
    clone = np.empty((3, 9))
    clone[:, 0:3] = -rho * A
    clone[:, 3:6] = rho * A @ skew(s) + dc_dth_obs
    clone[:, 6:9] = -rho * tau * A
    dc_dtau = -rho * A @ geo.p_rate + dc_dth_obs @ geo.theta_rate

    anchor = np.zeros((3, 9))
    anchor[:, 0:3] = rho * A
    anchor[:, 3:6] = -A @ skew(q - rho * p_a)

    T_BC = np.empty((3, 6))
    T_BC[:, 0:3] = -rho * geo.R_BC.T
    T_BC[:, 3:6] = geo.R_BC.T @ skew(d - rho * geo.t_BC)
    AR = A @ R_a
    T_BC_anchor = np.empty((3, 6))
    T_BC_anchor[:, 0:3] = rho * AR
    T_BC_anchor[:, 3:6] = -AR @ skew(Rbf)

    lm = np.empty((3, 3))
    lm[:, 0] = AR @ geo.R_BC_anchor[:, 0]
    lm[:, 1] = AR @ geo.R_BC_anchor[:, 1]
    lm[:, 2] = A @ (R_a @ geo.t_BC_anchor + p_a - geo.p_obs) - geo.R_BC.T @ geo.t_BC

    dtau = Jc @ dc_dtau
    blocks = {
        "clone": Jc @ clone,
        "anchor": Jc @ anchor,
        "T_BC": Jc @ T_BC,
        "T_BC_anchor": Jc @ T_BC_anchor,
        "intrinsics": Ji,
        "t_d": dtau,
        "t_r": dtau * geo.row_coeff,
        "landmark": Jc @ lm,
    }
    return uv, blocks


# --------------------------------------------------------------------------
# batched evaluation over the observations of one landmark

def project_jacobian_batch(intr_vecs, c):
    """Vectorized :func:`project_jacobian`.

    ``intr_vecs`` is ``(n, 8)`` (or ``(8,)``) and ``c`` is ``(n, 3)``.  Returns
    pixels ``(n, 2)``, ``d pixel / d c`` ``(n, 2, 3)``, ``d pixel / d intrinsics``
    ``(n, 2, 8)`` and a mask of points in front of the camera.
    """
    c = np.asarray(c, dtype=float).reshape(-1, 3)
    n = len(c)
    iv = np.broadcast_to(np.asarray(intr_vecs, dtype=float), (n, 8))
    fx, fy, cx, cy, k1, k2, p1, p2 = iv.T
    front = c[:, 2] > MIN_DEPTH * np.maximum(1.0, np.abs(c[:, :2]).max(axis=1))
    z = np.where(front, c[:, 2], 1.0)
    iz = 1.0 / z
    x, y = c[:, 0] * iz, c[:, 1] * iz
    r2 = x * x + y * y
    rad = 1.0 + k1 * r2 + k2 * r2 * r2
    drad = k1 + 2.0 * k2 * r2
    xd = x * rad + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * rad + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    uv = np.stack([fx * xd + cx, fy * yd + cy], axis=1)
    Jd = np.empty((n, 2, 2))
    Jd[:, 0, 0] = rad + 2 * x * x * drad + 2 * p1 * y + 6 * p2 * x
    Jd[:, 0, 1] = 2 * x * y * drad + 2 * p1 * x + 2 * p2 * y
    Jd[:, 1, 0] = Jd[:, 0, 1]
    Jd[:, 1, 1] = rad + 2 * y * y * drad + 6 * p1 * y + 2 * p2 * x
    Jn = np.zeros((n, 2, 3))
    Jn[:, 0, 0] = iz
    Jn[:, 0, 2] = -x * iz
    Jn[:, 1, 1] = iz
    Jn[:, 1, 2] = -y * iz
    Jc = np.stack([fx, fy], axis=1)[:, :, None] * (Jd @ Jn)
    Ji = np.zeros((n, 2, 8))
    Ji[:, 0, 0], Ji[:, 1, 1] = xd, yd
    Ji[:, 0, 2], Ji[:, 1, 3] = 1.0, 1.0
    Ji[:, 0, 4], Ji[:, 1, 4] = fx * x * r2, fy * y * r2
    Ji[:, 0, 5], Ji[:, 1, 5] = fx * x * r2 * r2, fy * y * r2 * r2
    Ji[:, 0, 6], Ji[:, 1, 6] = fx * 2 * x * y, fy * (r2 + 2 * y * y)
    Ji[:, 0, 7], Ji[:, 1, 7] = fx * (r2 + 2 * x * x), fy * 2 * x * y
    return uv, Jc, Ji, front


@dataclass
class BatchGeometry:
    """Per-observation arrays of :class:`ObservationGeometry` for one landmark.

    Observation quantities have a leading axis of length ``n``; the anchor
    quantities are shared.
    """

    p_obs: np.ndarray          # (n, 3)
    R_obs: np.ndarray          # (n, 3, 3)
    p_rate: np.ndarray         # (n, 3)
    theta_rate: np.ndarray     # (n, 3)
    p_clone: np.ndarray        # (n, 3)
    v_clone: np.ndarray        # (n, 3)
    tau: np.ndarray            # (n,)
    R_BC: np.ndarray           # (n, 3, 3)
    t_BC: np.ndarray           # (n, 3)
    row_coeff: np.ndarray      # (n,)
    intrinsics: np.ndarray     # (n, 8)
    p_anchor: np.ndarray
    R_anchor: np.ndarray
    R_BC_anchor: np.ndarray
    t_BC_anchor: np.ndarray
    gravity: float = 9.80665


def predict_batch(lm_params, geo: BatchGeometry):
    """Predicted pixels ``(n, 2)`` and in-front mask of one landmark's observations."""
    alpha, beta, rho = lm_params
    f = np.array([alpha, beta, 1.0])
    q = geo.R_anchor @ (geo.R_BC_anchor @ f + rho * geo.t_BC_anchor) + rho * geo.p_anchor
    d = np.einsum("nji,nj->ni", geo.R_obs, q - rho * geo.p_obs)
    c = np.einsum("nji,nj->ni", geo.R_BC, d - rho * geo.t_BC)
    uv, _, _, front = project_jacobian_batch(geo.intrinsics, c)
    return uv, front


def measurement_jacobian_batch(lm_params, geo: BatchGeometry, landmark_only: bool = False):
    """Vectorized :func:`measurement_jacobian` over the observations of one landmark.

    Returns ``(uv, blocks, front)``; each block carries a leading observation axis.
    With ``landmark_only`` only the ``landmark`` block is formed.
    """
    alpha, beta, rho = lm_params
    f = np.array([alpha, beta, 1.0])
    R_a, p_a = geo.R_anchor, geo.p_anchor
    Rbf = geo.R_BC_anchor @ f
    q = R_a @ (Rbf + rho * geo.t_BC_anchor) + rho * p_a
    # A = R_BC^T R_obs^T
    A = np.einsum("nji,nkj->nik", geo.R_BC, geo.R_obs)
    qo = q - rho * geo.p_obs
    d = np.einsum("nji,nj->ni", geo.R_obs, qo)
    c = np.einsum("nji,nj->ni", geo.R_BC, d - rho * geo.t_BC)
    uv, Jc, Ji, front = project_jacobian_batch(geo.intrinsics, c)
    AR = A @ R_a
    lm = np.empty((len(c), 3, 3))
    lm[:, :, 0] = AR @ geo.R_BC_anchor[:, 0]
    lm[:, :, 1] = AR @ geo.R_BC_anchor[:, 1]
    lm[:, :, 2] = (np.einsum("nij,j->ni", A, R_a @ geo.t_BC_anchor + p_a)
                   - np.einsum("nij,nj->ni", A, geo.p_obs)
                   - np.einsum("nji,nj->ni", geo.R_BC, geo.t_BC))
    blocks = {"landmark": Jc @ lm}
    if landmark_only:
        return uv, blocks, front

    g = np.array([0.0, 0.0, -geo.gravity])
    tau = geo.tau[:, None]
    s = geo.p_obs - geo.p_clone - geo.v_clone * tau - 0.5 * g * tau * tau
    dc_dth_obs = A @ skews(qo)
    n = len(c)
    clone = np.empty((n, 3, 9))
    clone[:, :, 0:3] = -rho * A
    clone[:, :, 3:6] = rho * (A @ skews(s)) + dc_dth_obs
    clone[:, :, 6:9] = -rho * A * tau[:, :, None]
    dc_dtau = (-rho * np.einsum("nij,nj->ni", A, geo.p_rate)
               + np.einsum("nij,nj->ni", dc_dth_obs, geo.theta_rate))
    anchor = np.zeros((n, 3, 9))
    anchor[:, :, 0:3] = rho * A
    anchor[:, :, 3:6] = -A @ skew(q - rho * p_a)
    RBCt = np.transpose(geo.R_BC, (0, 2, 1))
    T_BC = np.empty((n, 3, 6))
    T_BC[:, :, 0:3] = -rho * RBCt
    T_BC[:, :, 3:6] = RBCt @ skews(d - rho * geo.t_BC)
    T_BC_anchor = np.empty((n, 3, 6))
    T_BC_anchor[:, :, 0:3] = rho * AR
    T_BC_anchor[:, :, 3:6] = -AR @ skew(Rbf)
    dtau = np.einsum("nij,nj->ni", Jc, dc_dtau)
    blocks.update({
        "clone": Jc @ clone,
        "anchor": Jc @ anchor,
        "T_BC": Jc @ T_BC,
        "T_BC_anchor": Jc @ T_BC_anchor,
        "intrinsics": Ji,
        "t_d": dtau,
        "t_r": dtau * geo.row_coeff[:, None],
    })
    return uv, blocks, front
