"""Keyframe-based structureless filter.

The state holds the current navigation state, IMU parameters, per-camera
parameters and a sliding window of navigation-state clones.  Landmarks are
never part of the state: every completed feature track is triangulated,
linearized, and projected onto the left nullspace of its landmark Jacobian
before an ordinary EKF update.

Error-state layout::

    [nav(9), x_imu(6 or 33), cam_0(...), ..., clone_0(9), clone_1(9), ...]
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .camera import BatchGeometry, ExtrinsicKind, body_camera_transform, extrinsic_jacobian
from . import _kernels
from .frontend import Tracker, keyframe_decision
from .imu import (GRAVITY, NAV_DIM, ImuData, ImuModel, ImuNoise, ImuParams, InsufficientDataError,
                  fej_transition, integrate, _inverses)
from .manifold import NavState, Rotation, boxplus_nav, so3_exp

log = logging.getLogger(__name__)

Z95 = 1.6448536269514722


def chi2_quantile(dof: int, z: float = Z95) -> float:
    """Wilson-Hilferty approximation of a chi-square quantile."""
    if dof <= 0:
        return 0.0
    k = float(dof)
    h = 2.0 / (9.0 * k)
    return k * (1.0 - h + z * np.sqrt(h)) ** 3


# --------------------------------------------------------------------------
# configuration

@dataclass
class WindowConfig:
    n_kf: int = 7
    n_tf: int = 5
    X: int = 3

    def __post_init__(self):
        if self.n_kf < 1 or self.n_tf < 1:
            raise ValueError("N_kf and N_tf must be at least 1")
        if self.X not in (2, 3):
            raise ValueError("marginalization batch must be 2 or 3")

    @property
    def capacity(self) -> int:
        return self.n_kf + self.n_tf


@dataclass
class Priors:
    """Initial standard deviations of the error state."""

    position: float = 0.01                                   # m
    orientation: tuple = (np.deg2rad(1.0), np.deg2rad(1.0), np.deg2rad(3.0))   # rad
    velocity: float = 0.1                                    # m/s
    b_g: float = np.deg2rad(1.72)                            # rad/s
    b_a: float = 0.1                                         # m/s^2
    T_g: float = 0.005
    T_s: float = 0.001
    T_a: float = 0.005
    ext_translation: float = 0.02                            # m
    ext_rotation: float = 0.0                                # rad
    focal: float = 5.0                                       # px
    principal: float = 5.0                                   # px
    distortion: tuple = (0.05, 0.01, 0.001, 0.001)
    t_d: float = 0.005                                       # s
    t_r: float = 0.005                                       # s


@dataclass
class FilterConfig:
    window: WindowConfig = field(default_factory=WindowConfig)
    noise: ImuNoise = field(default_factory=ImuNoise)
    use_fej: bool = True
    pixel_sigma: float = 1.0
    gate_quantile_z: float = Z95
    gate: bool = True
    qr_compress: bool = True
    gravity: float = GRAVITY
    keyframe_overlap: float = 0.6
    keyframe_ratio: float = 0.2
    infinity_parallax_deg: float = 1.0
    triangulation_iters: int = 10
    psd_check_every: int = 10
    locked: tuple = ()           # parameter block names, see FilterState.block_slices


# --------------------------------------------------------------------------
# state

@dataclass
class Clone:
    frame_id: int
    is_keyframe: bool
    epoch: float
    raw_stamp: float
    state: NavState
    p_fej: np.ndarray
    v_fej: np.ndarray


class EvaluationPoint(NamedTuple):
    p: np.ndarray
    R: np.ndarray
    v: np.ndarray


def evaluation_point(clone: Clone, use_fej: bool = True) -> EvaluationPoint:
    """Linearization point of a clone: first-estimate position and velocity, latest rotation."""
    R = clone.state.R_WB.matrix()
    if use_fej:
        return EvaluationPoint(clone.p_fej, R, clone.v_fej)
    return EvaluationPoint(clone.state.t_WB, R, clone.state.v_WB)


@dataclass
class FilterState:
    nav: NavState
    imu: ImuParams
    cams: list
    P: np.ndarray
    clones: list = field(default_factory=list)
    nav_p_fej: np.ndarray | None = None
    nav_v_fej: np.ndarray | None = None
    locked: np.ndarray | None = None     # boolean mask over the parameter part

    def __post_init__(self):
        if self.nav_p_fej is None:
            self.nav_p_fej = self.nav.t_WB.copy()
        if self.nav_v_fej is None:
            self.nav_v_fej = self.nav.v_WB.copy()
        if self.locked is None:
            self.locked = np.zeros(self.param_dim, dtype=bool)

    # -- layout -----------------------------------------------------------
    @property
    def imu_dim(self) -> int:
        return self.imu.dim

    @property
    def cam_offsets(self) -> list:
        offs, o = [], NAV_DIM + self.imu.dim
        for c in self.cams:
            offs.append(o)
            o += c.dim
        return offs

    @property
    def param_dim(self) -> int:
        return self.imu.dim + sum(c.dim for c in self.cams)

    @property
    def clone_offset(self) -> int:
        return NAV_DIM + self.param_dim

    @property
    def dim(self) -> int:
        return self.clone_offset + 9 * len(self.clones)

    def clone_slice(self, i: int) -> slice:
        o = self.clone_offset + 9 * i
        return slice(o, o + 9)

    def clone_index(self) -> dict:
        return {c.frame_id: i for i, c in enumerate(self.clones)}

    def block_slices(self) -> dict:
        """Named parameter blocks with their slices into the full error state."""
        out = {"b_g": slice(9, 12), "b_a": slice(12, 15)}
        if self.imu.model is ImuModel.GENERIC:
            out.update({"T_g": slice(15, 24), "T_s": slice(24, 33), "T_a": slice(33, 42)})
        for k, (c, o) in enumerate(zip(self.cams, self.cam_offsets)):
            ne = c.extrinsics.dim
            out[f"cam{k}.extrinsics"] = slice(o, o + ne)
            out[f"cam{k}.intrinsics"] = slice(o + ne, o + ne + 8)
            out[f"cam{k}.t_d"] = slice(o + ne + 8, o + ne + 9)
            out[f"cam{k}.t_r"] = slice(o + ne + 9, o + ne + 10)
        return out

    def locked_indices(self) -> np.ndarray:
        return NAV_DIM + np.flatnonzero(self.locked)

    def zero_locked(self) -> None:
        idx = self.locked_indices()
        if len(idx):
            self.P[idx, :] = 0.0
            self.P[:, idx] = 0.0


def validate_compatibility(imu: ImuParams, cams) -> None:
    """Generic IMU models require the camera-centric body frame, simple models the IMU frame."""
    if not cams:
        raise ValueError("at least one camera is required")
    main = cams[0].extrinsics.kind
    if imu.model is ImuModel.GENERIC and main is not ExtrinsicKind.MAIN_CAMERA_CENTRIC:
        raise ValueError("the generic IMU model needs the main camera in the camera-centric convention")
    if imu.model is ImuModel.SIMPLE and main is ExtrinsicKind.MAIN_CAMERA_CENTRIC:
        raise ValueError("the simple IMU model uses the IMU-centric convention with a full T_BC")
    for c in cams[1:]:
        if c.extrinsics.kind is ExtrinsicKind.MAIN_CAMERA_CENTRIC:
            raise ValueError("only the main camera can be camera-centric")


def prior_covariance(imu: ImuParams, cams, priors: Priors) -> np.ndarray:
    """Diagonal initial covariance over navigation state and parameters."""
    sig = [priors.position] * 3 + list(priors.orientation) + [priors.velocity] * 3
    sig += [priors.b_g] * 3 + [priors.b_a] * 3
    if imu.model is ImuModel.GENERIC:
        sig += [priors.T_g] * 9 + [priors.T_s] * 9 + [priors.T_a] * 9
    for c in cams:
        sig += [priors.ext_translation] * 3
        if c.extrinsics.dim == 6:
            sig += [priors.ext_rotation] * 3
        sig += [priors.focal] * 2 + [priors.principal] * 2 + list(priors.distortion)
        sig += [priors.t_d, priors.t_r]
    return np.diag(np.square(np.asarray(sig, dtype=float)))


def make_state(nav: NavState, imu: ImuParams, cams, priors: Priors, locked=()) -> FilterState:
    """Filter state with a diagonal prior; zero-variance and named blocks are locked."""
    validate_compatibility(imu, cams)
    imu.check()
    P = prior_covariance(imu, cams, priors)
    st = FilterState(nav.copy(), imu.copy(), [c.copy() for c in cams], P)
    mask = np.diag(P)[NAV_DIM:] == 0.0
    blocks = st.block_slices()
    for name in locked:
        if name not in blocks:
            raise KeyError(f"unknown parameter block {name!r}; known: {sorted(blocks)}")
        sl = blocks[name]
        mask[sl.start - NAV_DIM:sl.stop - NAV_DIM] = True
    st.locked = mask
    st.zero_locked()
    return st


def initialize(imu_data: ImuData, imu: ImuParams, cams, priors: Priors | None = None,
               n_readings: int = 20, gravity: float = GRAVITY, locked=()) -> FilterState:
    """Static initialization from the first IMU readings.

    Position, velocity and the accelerometer bias start at zero, the gyroscope
    bias at the mean gyro reading, and the orientation aligns the world z axis
    with the measured specific force.
    """
    if len(imu_data) < 10:
        raise InsufficientDataError("at least 10 IMU readings are needed to initialize")
    n = min(n_readings, len(imu_data))
    acc = imu_data.accel[:n].mean(axis=0)
    gyr = imu_data.gyro[:n].mean(axis=0)
    norm = np.linalg.norm(acc)
    if abs(norm - gravity) > 0.2 * gravity:
        raise ValueError(f"accelerometer norm {norm:.3f} is not close to gravity; not static")
    R_WB = gravity_aligned_rotation(acc)
    imu = imu.copy()
    imu.b_g = gyr
    imu.b_a = np.zeros(3)
    nav = NavState(np.zeros(3), Rotation.from_matrix(R_WB), np.zeros(3), float(imu_data.t[n - 1]))
    return make_state(nav, imu, cams, priors or Priors(), locked)


def gravity_aligned_rotation(accel_body) -> np.ndarray:
    """Minimal rotation ``R_WB`` with ``R_WB @ accel_body`` along world +z."""
    z_b = np.asarray(accel_body, dtype=float)
    z_b = z_b / np.linalg.norm(z_b)
    # rotate z_b onto e_z by the shortest arc
    e_z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z_b, e_z)
    s, c = np.linalg.norm(axis), float(z_b @ e_z)
    if s < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    return so3_exp(axis / s * np.arctan2(s, c)).matrix()


# --------------------------------------------------------------------------
# landmark triangulation

class Triangulation(NamedTuple):
    params: np.ndarray       # alpha, beta, rho
    anchor: int              # index into the observation list
    at_infinity: bool
    ok: bool


def _camera_rays(p_obs, R_obs, R_BC, t_BC, bearings):
    R_WC = R_obs @ R_BC
    centers = p_obs + np.einsum("nij,nj->ni", R_obs, t_BC)
    rays = np.einsum("nij,nj->ni", R_WC, bearings)
    return centers, R_WC, rays


def dlt_point(centers, R_WC, bearings, degenerate_ratio: float = 1e-7):
    """Homogeneous world point from normalized bearings; ``None`` when degenerate."""
    shift = centers.mean(axis=0)
    rows = []
    for Ci, Ri, b in zip(centers - shift, R_WC, bearings):
        Pm = np.hstack([Ri.T, (-Ri.T @ Ci)[:, None]])
        rows.append(b[0] * Pm[2] - Pm[0])
        rows.append(b[1] * Pm[2] - Pm[1])
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, s, Vt = np.linalg.svd(A)
    if s[2] < degenerate_ratio * s[0]:
        return None
    X = Vt[-1]
    if abs(X[3]) < 1e-12 * np.linalg.norm(X[:3]):
        return None
    return X[:3] / X[3] + shift


def max_parallax(rays) -> float:
    """Largest angle (rad) between any two viewing rays."""
    u = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    cosines = np.clip(u @ u.T, -1.0, 1.0)
    return float(np.arccos(cosines.min()))


BLOCK_NAMES = ("landmark", "clone", "anchor", "T_BC", "T_BC_anchor", "intrinsics", "t_d", "t_r")


def evaluate_landmark(lm, geo: BatchGeometry, mode: int = 2):
    """Compiled counterpart of :func:`measurement_jacobian_batch`.

    ``mode`` 0 predicts pixels only, 1 adds the landmark block, 2 every block.
    Returns ``(uv, blocks, front)``.
    """
    n = len(geo.tau)
    uv = np.empty((n, 2))
    front = np.empty(n, dtype=bool)
    blocks = (np.empty((n, 2, 3)), np.empty((n, 2, 9)), np.empty((n, 2, 9)), np.empty((n, 2, 6)),
              np.empty((n, 2, 6)), np.empty((n, 2, 8)), np.empty((n, 2)), np.empty((n, 2)))
    _kernels.aid_eval(np.asarray(lm, dtype=float), geo.p_obs, geo.R_obs, geo.p_rate,
                      geo.theta_rate, geo.p_clone, geo.v_clone, geo.tau, geo.R_BC, geo.t_BC,
                      geo.row_coeff, geo.intrinsics, geo.p_anchor, geo.R_anchor,
                      geo.R_BC_anchor, geo.t_BC_anchor, geo.gravity, mode, uv, front, *blocks)
    return uv, dict(zip(BLOCK_NAMES, blocks)), front


def refine_landmark(params, geo: BatchGeometry, z, iters: int = 10):
    """Levenberg-Marquardt refinement; two parameters keep the inverse depth at zero."""
    free = len(params)
    x0 = np.zeros(3)
    x0[:free] = params
    return _kernels.refine_landmark(x0, free, geo.p_obs, geo.R_obs, geo.R_BC, geo.t_BC,
                                    geo.intrinsics, geo.p_anchor, geo.R_anchor, geo.R_BC_anchor,
                                    geo.t_BC_anchor, np.ascontiguousarray(z, dtype=float), iters)


def triangulate(geo: BatchGeometry, uv, anchor: int = -1,
                infinity_parallax: float = np.deg2rad(1.0), iters: int = 10,
                degenerate_ratio: float = 1e-7) -> Triangulation:
    """AID landmark from observations with known camera poses.

    ``geo`` carries the per-observation body poses and camera parameters and
    the anchor pose; ``anchor`` indexes the observation whose camera holds the
    landmark.  Tracks with little parallax or a degenerate linear system are
    returned as points at infinity.
    """
    uv = np.ascontiguousarray(uv, dtype=float)
    n = len(uv)
    if n < 3:
        raise ValueError("triangulation needs at least three observations")
    anchor = anchor % n
    xy = _kernels.undistort_points(geo.intrinsics, uv)
    bearings = np.column_stack([xy, np.ones(n)])
    centers, R_WC, rays = _camera_rays(geo.p_obs, geo.R_obs, geo.R_BC, geo.t_BC, bearings)
    R_Wa = geo.R_anchor @ geo.R_BC_anchor
    c_a = geo.p_anchor + geo.R_anchor @ geo.t_BC_anchor
    params = None
    if max_parallax(rays) >= infinity_parallax:
        point, ok = _kernels.dlt_point(centers, R_WC, bearings, degenerate_ratio)
        if ok:
            d = R_Wa.T @ (point - c_a)
            if d[2] > 1e-3:
                params = np.array([d[0] / d[2], d[1] / d[2], 1.0 / d[2]])
    if params is not None:
        x, ok = refine_landmark(params, geo, uv, iters)
        if ok and x[2] > 0.0:
            return Triangulation(x, anchor, False, True)
    # point at infinity: direction from the rotation-compensated mean ray
    mean_dir = R_Wa.T @ (rays / np.linalg.norm(rays, axis=1, keepdims=True)).sum(axis=0)
    if mean_dir[2] <= 1e-6:
        return Triangulation(np.zeros(3), anchor, True, False)
    x, ok = refine_landmark(mean_dir[:2] / mean_dir[2], geo, uv, iters)
    return Triangulation(x, anchor, True, ok)


# --------------------------------------------------------------------------
# the filter

class FrameReport(NamedTuple):
    frame_id: int
    epoch: float
    keyframe: bool
    completed: int
    used_tracks: int
    rejected_tracks: int
    rows: int
    marginalized: tuple


class LinearizedTrack(NamedTuple):
    r: np.ndarray           # projected residual
    H: np.ndarray           # projected Jacobian over the full error state
    dof: int
    landmark_id: int


class KeyframeFilter:
    """Sliding-window filter driven by frames of simulated or real observations."""

    def __init__(self, state: FilterState, imu_data: ImuData, config: FilterConfig | None = None):
        self.state = state
        self.imu_data = imu_data
        self.config = config or FilterConfig()
        self.tracker = Tracker()
        self.n_updates = 0
        self.frames_processed = 0
        self.last_report: FrameReport | None = None
        self._cams_cached = None

    # -- propagation and cloning --------------------------------------------
    def propagate_to(self, t_target: float) -> None:
        st, cfg = self.state, self.config
        if t_target == st.nav.epoch:
            return
        res = integrate(st.nav, st.imu, self.imu_data, t_target, cfg.noise, gravity=cfg.gravity)
        Phi = res.Phi
        dt = t_target - st.nav.epoch
        if cfg.use_fej:
            Phi = fej_transition(Phi, res.state.t_WB, res.state.v_WB, st.nav_p_fej, st.nav_v_fej,
                                 dt, cfg.gravity)
        m = NAV_DIM + st.imu.dim
        P = st.P
        P[:m, :] = Phi @ P[:m, :]
        P[:, :m] = P[:, :m] @ Phi.T
        P[:m, :m] += res.Q
        st.P = 0.5 * (P + P.T)
        st.nav = res.state
        st.nav_p_fej = res.state.t_WB.copy()
        st.nav_v_fej = res.state.v_WB.copy()
        st.zero_locked()

    def augment(self, frame_id: int, raw_stamp: float) -> Clone:
        """Append a clone of the current navigation state to the window."""
        st = self.state
        n = st.dim
        P = np.zeros((n + 9, n + 9))
        P[:n, :n] = st.P
        P[n:, :n] = st.P[:9, :]
        P[:n, n:] = st.P[:, :9]
        P[n:, n:] = st.P[:9, :9]
        st.P = P
        c = Clone(frame_id, False, st.nav.epoch, raw_stamp, st.nav.copy(),
                  st.nav_p_fej.copy(), st.nav_v_fej.copy())
        st.clones.append(c)
        return c

    def process_frame(self, frame_id: int, raw_stamp: float, observations) -> FrameReport:
        """Propagate, clone, associate, update and marginalize for one frame.

        ``observations`` holds one object per camera with ``ids``, ``uv`` and
        ``cam`` attributes.
        """
        st, cfg = self.state, self.config
        t_j = raw_stamp + st.cams[0].temporal.t_d
        self.propagate_to(t_j)
        clone = self.augment(frame_id, raw_stamp)
        assoc = self.tracker.associate(frame_id, raw_stamp, observations,
                                       [c.intrinsics for c in st.cams])
        is_kf = (len(st.clones) == 1 or
                 keyframe_decision(assoc.matched, cfg.keyframe_overlap, cfg.keyframe_ratio))
        if is_kf:
            clone.is_keyframe = True
            self.tracker.add_keyframe(frame_id)
        systems, rejected = self._linearize_tracks(assoc.completed)
        rows = self._update(systems)
        marg = self.marginalize_redundant()
        self.frames_processed += 1
        if cfg.psd_check_every and self.frames_processed % cfg.psd_check_every == 0:
            self._psd_floor()
        self.last_report = FrameReport(frame_id, t_j, is_kf, len(assoc.completed), len(systems),
                                       rejected, rows, tuple(marg))
        return self.last_report

    # -- observation geometry -------------------------------------------------
    def _camera_cache(self) -> dict:
        """Per-camera ``(R_BC, t_BC, intrinsics, extrinsic maps)`` for the current camera objects."""
        cams = self.state.cams
        key = tuple(id(c) for c in cams)
        if self._cams_cached is None or self._cams_cached[0] != key:
            self._cams_cached = (key, {k: body_camera_transform(cams, k)
                                       + (cams[k].intrinsics.vector(), extrinsic_jacobian(cams, k))
                                       for k in range(len(cams))})
        return self._cams_cached[1]

    def _observation_epochs(self, obs):
        cam = self.state.cams[obs.cam]
        h = float(cam.intrinsics.height)
        rc = (obs.row - 0.5 * h) / h
        return obs.raw_stamp + cam.temporal.t_d + rc * cam.temporal.t_r, rc

    def observation_poses(self, obs_lists):
        """Micro-propagated body poses for lists of observations, grouped per clone."""
        st = self.state
        cidx = st.clone_index()
        flat = [(k, n, o) for k, lst in enumerate(obs_lists) for n, o in enumerate(lst)]
        total = len(flat)
        p = np.empty((total, 3))
        R = np.empty((total, 3, 3))
        pr = np.empty((total, 3))
        tr = np.empty((total, 3))
        tau = np.empty(total)
        rc = np.empty(total)
        ci = np.empty(total, dtype=int)
        epochs = np.empty(total)
        for i, (_, _, o) in enumerate(flat):
            epochs[i], rc[i] = self._observation_epochs(o)
            ci[i] = cidx[o.frame_id]
        Tg_inv, Ta_inv = _inverses(st.imu)
        data = self.imu_data
        v = np.empty((total, 3))
        lo, hi = epochs.min() if total else 0.0, epochs.max() if total else 0.0
        if total and (lo < data.t[0] or hi > data.t[-1]):
            raise InsufficientDataError(f"IMU data does not cover observation epochs [{lo}, {hi}]")
        for c in np.unique(ci):
            sel = np.flatnonzero(ci == c)
            cl = st.clones[c]
            o = [np.empty((len(sel), 3)), np.empty((len(sel), 3, 3)), np.empty((len(sel), 3)),
                 np.empty((len(sel), 3)), np.empty((len(sel), 3))]
            _kernels.micro_kernel(cl.state.t_WB, cl.state.R_WB.matrix(), cl.state.v_WB, cl.epoch,
                                  data.t, data.grid, data.gyro, data.accel, st.imu.b_g, st.imu.b_a,
                                  st.imu.T_s, Tg_inv, Ta_inv, self.config.gravity, epochs[sel], *o)
            p[sel], R[sel], v[sel], pr[sel], tr[sel] = o
            tau[sel] = epochs[sel] - cl.epoch
        out, start = [], 0
        for lst in obs_lists:
            sl = slice(start, start + len(lst))
            out.append((p[sl], R[sl], pr[sl], tr[sl], tau[sl], rc[sl], ci[sl]))
            start += len(lst)
        return out

    def _geometry(self, obs, poses, anchor: int, fej: bool) -> BatchGeometry:
        st = self.state
        p, R, pr, tr, tau, rc, ci = poses
        n = len(obs)
        R_BC = np.empty((n, 3, 3))
        t_BC = np.empty((n, 3))
        intr = np.empty((n, 8))
        cache = self._camera_cache()
        for i, o in enumerate(obs):
            R_BC[i], t_BC[i], intr[i] = cache[o.cam][:3]
        p_clone = np.array([st.clones[c].state.t_WB for c in ci])
        v_clone = np.array([st.clones[c].state.v_WB for c in ci])
        a_cl = st.clones[ci[anchor]]
        p_anchor = a_cl.state.t_WB
        if fej:
            p_fej = np.array([st.clones[c].p_fej for c in ci])
            v_fej = np.array([st.clones[c].v_fej for c in ci])
            dp, dv = p_clone - p_fej, v_clone - v_fej
            p = p - dp - dv * tau[:, None]
            pr = pr - dv
            p_clone, v_clone = p_fej, v_fej
            p_anchor = a_cl.p_fej
        R_BCa, t_BCa = cache[obs[anchor].cam][:2]
        return BatchGeometry(p, R, pr, tr, p_clone, v_clone, tau, R_BC, t_BC, rc, intr,
                             p_anchor, a_cl.state.R_WB.matrix(), R_BCa, t_BCa, self.config.gravity)

    # -- linearization ---------------------------------------------------------
    def triangulate_track(self, obs, poses, anchor: int = -1) -> Triangulation:
        geo = self._geometry(obs, poses, anchor % len(obs), fej=False)
        uv = np.array([o.uv for o in obs])
        return triangulate(geo, uv, anchor, np.deg2rad(self.config.infinity_parallax_deg),
                           self.config.triangulation_iters)

    def linearize(self, obs, poses, tri: Triangulation, landmark_id: int = -1,
                  use_obs=None) -> LinearizedTrack | None:
        """Nullspace-projected residual and Jacobian of one landmark.

        ``use_obs`` optionally restricts the residuals to a subset of ``obs``
        (indices); the landmark estimate still comes from ``tri``.
        """
        st, cfg = self.state, self.config
        if use_obs is not None:
            use_obs = list(use_obs)
            keep = np.array(use_obs)
            obs = [obs[i] for i in use_obs]
            poses = tuple(a[keep] for a in poses)
            if tri.anchor not in use_obs:
                raise ValueError("the landmark anchor must be among the used observations")
            anchor = use_obs.index(tri.anchor)
        else:
            anchor = tri.anchor
        z = np.array([o.uv for o in obs])
        lm = tri.params
        geo = self._geometry(obs, poses, anchor, fej=False)
        if cfg.use_fej:
            uv, _, front = evaluate_landmark(lm, geo, mode=0)
            if not front.all():
                return None
            geo_j = self._geometry(obs, poses, anchor, fej=True)
            _, B, front = evaluate_landmark(lm, geo_j)
        else:
            uv, B, front = evaluate_landmark(lm, geo)
        if not front.all():
            return None
        n = len(obs)
        r = (z - uv).ravel()
        H = np.zeros((2 * n, st.dim))
        ci = poses[6]
        a_sl = st.clone_slice(ci[anchor])
        H[:, a_sl] += B["anchor"].reshape(2 * n, 9)
        offs = st.cam_offsets
        cache = self._camera_cache()
        ext_maps = {k: v[3] for k, v in cache.items()}
        a_cam = obs[anchor].cam
        for i, o in enumerate(obs):
            rows = slice(2 * i, 2 * i + 2)
            H[rows, st.clone_slice(ci[i])] += B["clone"][i]
            k = o.cam
            cam = st.cams[k]
            ne = cam.extrinsics.dim
            for kk, M in ext_maps[k].items():
                H[rows, offs[kk]:offs[kk] + st.cams[kk].extrinsics.dim] += B["T_BC"][i] @ M
            for kk, M in ext_maps[a_cam].items():
                H[rows, offs[kk]:offs[kk] + st.cams[kk].extrinsics.dim] += B["T_BC_anchor"][i] @ M
            o_k = offs[k] + ne
            H[rows, o_k:o_k + 8] += B["intrinsics"][i]
            H[rows, o_k + 8] += B["t_d"][i]
            H[rows, o_k + 9] += B["t_r"][i]
        Hf = B["landmark"].reshape(2 * n, 3)
        if tri.at_infinity:
            Hf = Hf[:, :2]
        proj = project_out_landmark(Hf, r, H)
        if proj is None:
            return None
        r_o, H_o = proj
        lidx = st.locked_indices()
        if len(lidx):
            H_o[:, lidx] = 0.0
        return LinearizedTrack(r_o, H_o, len(r_o), landmark_id)

    def gate(self, lt: LinearizedTrack) -> bool:
        cfg = self.config
        if not cfg.gate:
            return True
        PHt = self.state.P @ lt.H.T
        S = lt.H @ PHt + cfg.pixel_sigma ** 2 * np.eye(lt.dof)
        try:
            g = float(lt.r @ np.linalg.solve(S, lt.r))
        except np.linalg.LinAlgError:
            return False
        return g < chi2_quantile(lt.dof, cfg.gate_quantile_z)

    def _linearize_tracks(self, tracks):
        st = self.state
        cidx = st.clone_index()
        obs_lists = []
        for tr in tracks:
            obs_lists.append([o for o in tr.observations if o.frame_id in cidx])
        tracks = [t for t, o in zip(tracks, obs_lists) if len(o) >= 3]
        obs_lists = [o for o in obs_lists if len(o) >= 3]
        if not tracks:
            return [], 0
        all_poses = self.observation_poses(obs_lists)
        systems, rejected = [], 0
        for tr, obs, poses in zip(tracks, obs_lists, all_poses):
            tri = self.triangulate_track(obs, poses)
            lt = self.linearize(obs, poses, tri, tr.landmark_id) if tri.ok else None
            if lt is None or not self.gate(lt):
                rejected += 1
                continue
            systems.append(lt)
        return systems, rejected

    # -- update --------------------------------------------------------------
    def _update(self, systems) -> int:
        if not systems:
            return 0
        st, cfg = self.state, self.config
        r = np.concatenate([s.r for s in systems])
        H = np.vstack([s.H for s in systems])
        if cfg.qr_compress:
            H, r = qr_compress(H, r)
        ekf_update(st, H, r, cfg.pixel_sigma ** 2)
        self._cams_cached = None
        self.n_updates += 1
        return len(r)

    # -- marginalization ---------------------------------------------------
    def marginalize_redundant(self) -> list:
        st, cfg = self.state, self.config
        sel = select_redundant_frames(st.clones, cfg.window)
        if not sel:
            return []
        sel_ids = {st.clones[i].frame_id for i in sel}
        cidx = st.clone_index()
        cand, obs_lists, use = [], [], []
        for tr in self.tracker.tracks.values():
            obs = [o for o in tr.observations if o.frame_id in cidx]
            in_sel = [i for i, o in enumerate(obs) if o.frame_id in sel_ids]
            if len(in_sel) >= 3:
                cand.append(tr)
                obs_lists.append(obs)
                use.append(in_sel)
        systems = []
        if cand:
            all_poses = self.observation_poses(obs_lists)
            for tr, obs, poses, in_sel in zip(cand, obs_lists, all_poses, use):
                # anchor in the latest redundant frame that saw the landmark
                tri = self.triangulate_track(obs, poses, anchor=in_sel[-1])
                if not tri.ok:
                    continue
                lt = self.linearize(obs, poses, tri, tr.landmark_id, use_obs=in_sel)
                if lt is not None and self.gate(lt):
                    systems.append(lt)
        self._update(systems)
        self.tracker.remove_frames(sel_ids)
        self.tracker.keyframes = [kf for kf in self.tracker.keyframes if kf[0] not in sel_ids]
        remove_clones(st, sel)
        return sorted(sel_ids)

    def _psd_floor(self) -> None:
        psd_floor(self.state)

    def flush(self) -> int:
        """Update with every remaining track; call at the end of a sequence."""
        systems, _ = self._linearize_tracks(self.tracker.flush())
        return self._update(systems)


def select_redundant_frames(clones, window: WindowConfig) -> list:
    """Indices of clones to marginalize, or an empty list while within capacity.

    Non-keyframes outside the most recent ``n_tf`` frames go first, then the
    oldest keyframes; at least ``X`` frames are chosen when available.
    """
    n = len(clones)
    if n <= window.capacity:
        return []
    count = max(window.X, n - window.capacity)
    older = list(range(n - window.n_tf))
    order = [i for i in older if not clones[i].is_keyframe] + [i for i in older if clones[i].is_keyframe]
    return sorted(order[:count])


def remove_clones(st: FilterState, indices) -> None:
    indices = set(indices)
    keep = np.ones(st.dim, dtype=bool)
    for i in indices:
        keep[st.clone_slice(i)] = False
    st.P = st.P[np.ix_(keep, keep)]
    st.clones = [c for i, c in enumerate(st.clones) if i not in indices]


def project_out_landmark(H_f, r, H):
    """Residual and Jacobian on the left nullspace of the landmark Jacobian ``H_f``.

    The basis is orthonormal, so isotropic pixel noise stays isotropic.
    Returns ``None`` when nothing is left after the projection.
    """
    U, s, _ = np.linalg.svd(H_f, full_matrices=True)
    rank = int(np.sum(s > 1e-9 * max(s[0], 1e-300)))
    N = U[:, rank:]
    if N.shape[1] == 0:
        return None
    return N.T @ r, N.T @ H


def qr_compress(H, r):
    """Thin-QR reduction of a tall system to at most ``H.shape[1]`` rows."""
    if H.shape[0] <= H.shape[1]:
        return H, r
    Q, Rm = np.linalg.qr(H)
    return Rm, Q.T @ r


def kalman_gain_update(P, H, r, meas_var: float):
    """Correction and posterior covariance for ``r = H dx + n``, ``n ~ N(0, meas_var I)``."""
    PHt = P @ H.T
    S = H @ PHt + meas_var * np.eye(len(r))
    L = np.linalg.cholesky(S)
    Kt = np.linalg.solve(L.T, np.linalg.solve(L, PHt.T))     # K^T = S^-1 H P
    P = P - PHt @ Kt
    return Kt.T @ r, 0.5 * (P + P.T)


def ekf_update(st: FilterState, H, r, meas_var: float) -> np.ndarray:
    """Standard EKF update with isotropic measurement noise; returns the correction."""
    dx, st.P = kalman_gain_update(st.P, H, r, meas_var)
    lidx = st.locked_indices()
    if len(lidx):
        dx[lidx] = 0.0
    apply_correction(st, dx)
    st.zero_locked()
    return dx


def apply_correction(st: FilterState, dx) -> None:
    st.nav = boxplus_nav(st.nav, dx[0:9])
    o = NAV_DIM
    m = st.imu.dim
    if np.any(dx[o:o + m]):
        st.imu = st.imu.boxplus(dx[o:o + m])
    o += m
    for k, c in enumerate(st.cams):
        d = dx[o:o + c.dim]
        if np.any(d):
            st.cams[k] = c.boxplus(d)
        o += c.dim
    for i, cl in enumerate(st.clones):
        sl = st.clone_slice(i)
        cl.state = boxplus_nav(cl.state, dx[sl])


def psd_floor(st: FilterState, rel: float = 1e-9) -> float:
    """Inflate the diagonal when the covariance has eigenvalues below ``-rel * trace``."""
    free = np.ones(st.dim, dtype=bool)
    free[st.locked_indices()] = False
    sub = st.P[np.ix_(free, free)]
    w = np.linalg.eigvalsh(sub)
    tr = float(np.trace(sub))
    if w[0] < -rel * tr:
        log.warning("covariance eigenvalue %.3e below floor; inflating diagonal", w[0])
        idx = np.flatnonzero(free)
        st.P[idx, idx] += -w[0]
    return float(w[0])
