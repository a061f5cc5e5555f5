"""Synthetic scenes, trajectories, IMU readings and rolling-shutter images.

Trajectories are closed-form curves ``P(theta)`` in a phase ``theta`` that
advances as ``theta = rate * w(t)``.  The warp ``w`` is the identity unless a
standstill is requested, in which case its derivative ramps smoothly to zero,
stays there, and ramps back to one.  The body yaws with the horizontal path
tangent (wave) or the major ring (torus) and carries small sinusoidal roll
and pitch, so every derivative is available analytically.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .camera import CameraParams, body_camera_transform, project
from .imu import GRAVITY, ImuData, ImuNoise, ImuParams, model_apply
from .manifold import Pose, Rotation

log = logging.getLogger(__name__)

# camera z along body x, camera x along body -y, camera y along body -z
R_CB_NOMINAL = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


# --------------------------------------------------------------------------
# scene

@dataclass
class Scene:
    landmarks: np.ndarray           # (n, 3)
    half_extent: float = 7.0
    wall_height: float = 5.0

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self.landmarks))


def make_scene(seed: int, density: int = 150, half_extent: float = 7.0,
               wall_height: float = 5.0) -> Scene:
    """Landmarks drawn uniformly on the four vertical walls ``|x| = E`` and ``|y| = E``."""
    if density <= 0:
        raise ValueError("landmark density must be positive")
    rng = np.random.default_rng(seed)
    E = half_extent
    walls = []
    for axis, sign in ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)):
        pts = np.empty((density, 3))
        pts[:, axis] = sign * E
        pts[:, 1 - axis] = rng.uniform(-E, E, density)
        pts[:, 2] = rng.uniform(-0.5 * wall_height, 0.5 * wall_height, density)
        walls.append(pts)
    return Scene(np.vstack(walls), half_extent, wall_height)


# --------------------------------------------------------------------------
# trajectories

class TrajectoryKind(str, enum.Enum):
    WAVE = "wave"
    TORUS = "torus"


@dataclass
class TrajectorySpec:
    kind: TrajectoryKind = TrajectoryKind.WAVE
    duration: float = 60.0
    speed: float | None = None          # mean speed, m/s; default per kind
    radius: float = 4.0                 # wave circle radius / torus major radius
    amplitude: float = 1.0              # wave height / torus minor radius
    windings: int | None = None         # wave periods / torus windings per revolution
    tilt_deg: float | None = None      # attitude oscillation amplitude; default per kind
    tilt_freqs: tuple[float, float] | None = None
    standstill_start: float | None = None
    standstill_duration: float = 0.0
    standstill_ramp: float = 2.0

    def __post_init__(self):
        self.kind = TrajectoryKind(self.kind)
        if self.speed is None:
            self.speed = 1.26 if self.kind is TrajectoryKind.WAVE else 2.30
        if self.windings is None:
            self.windings = 4 if self.kind is TrajectoryKind.WAVE else 10
        if self.tilt_deg is None:
            self.tilt_deg = 10.0 if self.kind is TrajectoryKind.WAVE else 40.0
        if self.tilt_freqs is None:
            self.tilt_freqs = (3.0, 5.0) if self.kind is TrajectoryKind.WAVE else (10.0, 7.0)
        if self.duration <= 0:
            raise ValueError("duration must be positive")


class TrajectorySample(NamedTuple):
    t: np.ndarray
    p: np.ndarray          # (n, 3) position in world
    R: np.ndarray          # (n, 3, 3) R_WB
    v: np.ndarray          # (n, 3) velocity in world
    a: np.ndarray          # (n, 3) kinematic acceleration in world
    omega: np.ndarray      # (n, 3) body angular rate
    specific_force: np.ndarray  # (n, 3) body-frame specific force


def _raised_cosine_integral(x):
    """Integral over [0, x] of 0.5 (1 + cos(pi s)) for x in [0, 1]."""
    return 0.5 * (x + np.sin(np.pi * x) / np.pi)


class Trajectory:
    """Analytic ground-truth sampler for a :class:`TrajectorySpec`."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        self.rate = 1.0
        # mean of |dP/dtheta| over one period fixes the phase rate for the mean speed
        th = np.linspace(0.0, 2.0 * np.pi, 20001)[:-1]
        mean_norm = np.linalg.norm(self._curve(th)[1], axis=1).mean()
        self.rate = spec.speed / mean_norm

    # -- time warp ----------------------------------------------------------
    def _warp(self, t):
        """``w(t), w'(t), w''(t)`` for the optional standstill."""
        s = self.spec
        t = np.asarray(t, dtype=float)
        if s.standstill_start is None or s.standstill_duration <= 0.0:
            return t.copy(), np.ones_like(t), np.zeros_like(t)
        T, t0, D = s.standstill_ramp, s.standstill_start, s.standstill_duration
        a, b, c = t0 - T, t0, t0 + D        # ramp down on [a, b], still on [b, c], ramp up on [c, c+T]
        w = np.where(t < a, t, 0.0)
        wd = np.ones_like(t)
        wdd = np.zeros_like(t)
        down = (t >= a) & (t < b)
        x = (t[down] - a) / T
        w[down] = a + T * _raised_cosine_integral(x)
        wd[down] = 0.5 * (1.0 + np.cos(np.pi * x))
        wdd[down] = -0.5 * np.pi / T * np.sin(np.pi * x)
        still = (t >= b) & (t < c)
        w_stop = a + 0.5 * T
        w[still] = w_stop
        wd[still] = 0.0
        up = (t >= c) & (t < c + T)
        x = (t[up] - c) / T
        # w' rises as 0.5 (1 - cos(pi x))
        w[up] = w_stop + T * (x - _raised_cosine_integral(x))
        wd[up] = 0.5 * (1.0 - np.cos(np.pi * x))
        wdd[up] = 0.5 * np.pi / T * np.sin(np.pi * x)
        after = t >= c + T
        w[after] = w_stop + 0.5 * T + (t[after] - c - T)
        return w, wd, wdd

    # -- curve ----------------------------------------------------------------
    def _curve(self, th):
        """``P, P', P''`` with respect to the phase."""
        s = self.spec
        th = np.asarray(th, dtype=float)
        c, sn = np.cos(th), np.sin(th)
        m = float(s.windings)
        P, dP, ddP = (np.empty(th.shape + (3,)) for _ in range(3))
        if s.kind is TrajectoryKind.WAVE:
            r, A = s.radius, s.amplitude
            P[..., 0], P[..., 1], P[..., 2] = r * c, r * sn, A * np.sin(m * th)
            dP[..., 0], dP[..., 1], dP[..., 2] = -r * sn, r * c, A * m * np.cos(m * th)
            ddP[..., 0], ddP[..., 1], ddP[..., 2] = -r * c, -r * sn, -A * m * m * np.sin(m * th)
        else:
            R0, rho = s.radius, s.amplitude
            cm, sm = np.cos(m * th), np.sin(m * th)
            ring = R0 + rho * cm
            dring = -rho * m * sm
            ddring = -rho * m * m * cm
            P[..., 0], P[..., 1], P[..., 2] = ring * c, ring * sn, rho * sm
            dP[..., 0] = dring * c - ring * sn
            dP[..., 1] = dring * sn + ring * c
            dP[..., 2] = rho * m * cm
            ddP[..., 0] = ddring * c - 2.0 * dring * sn - ring * c
            ddP[..., 1] = ddring * sn + 2.0 * dring * c - ring * sn
            ddP[..., 2] = -rho * m * m * sm
        return P, dP, ddP

    def _attitude(self, th, dP, ddP):
        """Euler angles (yaw, pitch, roll) and their phase derivatives."""
        s = self.spec
        amp = np.deg2rad(s.tilt_deg)
        k1, k2 = s.tilt_freqs
        if s.kind is TrajectoryKind.WAVE:
            yaw = np.arctan2(dP[..., 1], dP[..., 0])
            h2 = dP[..., 0] ** 2 + dP[..., 1] ** 2
            dyaw = (dP[..., 0] * ddP[..., 1] - dP[..., 1] * ddP[..., 0]) / h2
        else:
            # heading along the major ring; the winding shows up as translation only
            yaw = th + 0.5 * np.pi
            dyaw = np.ones_like(th)
        roll = amp * np.sin(k1 * th)
        droll = amp * k1 * np.cos(k1 * th)
        pitch = amp * np.sin(k2 * th + 0.5)
        dpitch = amp * k2 * np.cos(k2 * th + 0.5)
        return yaw, pitch, roll, dyaw, dpitch, droll

    def check_time(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-12) or np.any(t > self.spec.duration + 1e-12):
            raise ValueError(f"time outside [0, {self.spec.duration}]")

    def sample(self, t, check: bool = True) -> TrajectorySample:
        """Pose, velocity, acceleration, body rate and specific force at ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if check:
            self.check_time(t)
        w, wd, wdd = self._warp(t)
        th = self.rate * w
        thd = self.rate * wd
        thdd = self.rate * wdd
        P, dP, ddP = self._curve(th)
        v = dP * thd[:, None]
        a = ddP * (thd ** 2)[:, None] + dP * thdd[:, None]
        yaw, pitch, roll, dyaw, dpitch, droll = self._attitude(th, dP, ddP)
        R = euler_zyx(yaw, pitch, roll)
        yd, pd, rd = dyaw * thd, dpitch * thd, droll * thd
        cr, sr = np.cos(roll), np.sin(roll)
        cp, sp = np.cos(pitch), np.sin(pitch)
        omega = np.stack([rd - yd * sp,
                          pd * cr + yd * cp * sr,
                          -pd * sr + yd * cp * cr], axis=-1)
        g = np.array([0.0, 0.0, -GRAVITY])
        f = np.einsum("nji,nj->ni", R, a - g)
        return TrajectorySample(t, P, R, v, a, omega, f)

    def pose(self, t) -> Pose:
        s = self.sample(t)
        return Pose(Rotation.from_matrix(s.R[0]), s.p[0])

    def mean_speed(self, n: int = 20001) -> float:
        """Arc length over duration by dense sampling."""
        t = np.linspace(0.0, self.spec.duration, n)
        p = self.sample(t).p
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum() / self.spec.duration)


def euler_zyx(yaw, pitch, roll) -> np.ndarray:
    """``Rz(yaw) Ry(pitch) Rx(roll)`` for arrays of angles, shape ``(n, 3, 3)``."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty(np.shape(yaw) + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def sample_trajectory(spec: TrajectorySpec | Trajectory, t):
    """``(T_WB, v_WB, omega_B, a_W)`` at a single epoch."""
    traj = spec if isinstance(spec, Trajectory) else Trajectory(spec)
    s = traj.sample(t)
    return Pose(Rotation.from_matrix(s.R[0]), s.p[0]), s.v[0], s.omega[0], s.a[0]


# --------------------------------------------------------------------------
# IMU synthesis

def synthesize_imu(traj: Trajectory, params: ImuParams, noise: ImuNoise | None,
                   rate: float | None = None, seed: int = 0,
                   t_start: float = 0.0, t_end: float | None = None) -> ImuData:
    """IMU readings at ``rate`` Hz with white noise and random-walk biases.

    White noise has variance ``sigma^2 f`` and each bias step ``sigma_b^2 / f``.
    ``noise=None`` produces noise-free readings with constant biases.
    """
    f = rate if rate is not None else (noise.rate if noise is not None else 100.0)
    if not f > 0:
        raise ValueError("IMU rate must be positive")
    t_end = traj.spec.duration if t_end is None else t_end
    n = int(np.floor((t_end - t_start) * f + 1e-9)) + 1
    t = t_start + np.arange(n) / f
    s = traj.sample(t)
    omega_m, a_m = model_apply(params, s.omega, s.specific_force)
    if noise is not None:
        rng = np.random.default_rng(seed)
        wg = rng.normal(0.0, noise.sigma_g * np.sqrt(f), (n, 3))
        wa = rng.normal(0.0, noise.sigma_a * np.sqrt(f), (n, 3))
        steps_g = rng.normal(0.0, noise.sigma_bg / np.sqrt(f), (n, 3))
        steps_a = rng.normal(0.0, noise.sigma_ba / np.sqrt(f), (n, 3))
        steps_g[0] = 0.0
        steps_a[0] = 0.0
        omega_m = omega_m + np.cumsum(steps_g, axis=0) + wg
        a_m = a_m + np.cumsum(steps_a, axis=0) + wa
    return ImuData(t, omega_m, a_m)


# --------------------------------------------------------------------------
# rolling-shutter frames

class FrameObservations(NamedTuple):
    ids: np.ndarray       # landmark ids
    uv: np.ndarray        # (n, 2) noisy pixels
    cam: int = 0


def _pixels_at(traj, scene_pts, R_BC, t_BC, intr, epochs):
    s = traj.sample(epochs, check=False)
    p_B = np.einsum("nji,nj->ni", s.R, scene_pts - s.p)
    c = (p_B - t_BC) @ R_BC
    return c


def synthesize_frame(traj: Trajectory, scene: Scene, cams, raw_stamp: float, seed: int = 0,
                     cam: int = 0, pixel_sigma: float = 1.0, max_iter: int = 8,
                     tol: float = 1e-4, margin: float = 0.0) -> FrameObservations:
    """Noisy rolling-shutter observations of all visible landmarks.

    Each image row ``v`` is exposed at ``raw + t_d + (v / h - 0.5) t_r``; the
    row where a landmark appears is found by Newton-Raphson on
    ``v - row(v) = 0``, differentiating the row numerically in time.
    """
    params: CameraParams = cams[cam]
    intr = params.intrinsics
    t_d, t_r = params.temporal.t_d, params.temporal.t_r
    R_BC, t_BC = body_camera_transform(cams, cam)
    h = float(intr.height)
    pts = scene.landmarks
    ids = scene.ids

    def epoch(v):
        return raw_stamp + t_d + (v / h - 0.5) * t_r

    def pixels(v, sel):
        c = _pixels_at(traj, pts[sel], R_BC, t_BC, intr, epoch(v))
        front = c[:, 2] > 1e-8
        uv = np.full((len(sel), 2), np.nan)
        if np.any(front):
            uv[front] = project(intr, c[front])
        return uv

    sel = np.arange(len(pts))
    v = np.full(len(pts), 0.5 * h)
    uv = pixels(v, sel)
    keep = np.isfinite(uv[:, 0])
    sel, v, uv = sel[keep], v[keep], uv[keep]
    # landmarks far outside the frame at mid-exposure cannot enter it
    keep = (np.abs(uv[:, 0] - 0.5 * intr.width) < 2.0 * intr.width) & \
           (np.abs(uv[:, 1] - 0.5 * h) < 2.0 * h)
    sel, v, uv = sel[keep], v[keep], uv[keep]
    if t_r > 0.0 and len(sel):
        dt = 1e-5
        for _ in range(max_iter):
            g = uv[:, 1] - v
            if np.all(np.abs(g) < tol):
                break
            uv_dt = pixels(v + dt * h / t_r, sel)
            drow_dv = (uv_dt[:, 1] - uv[:, 1]) / (dt * h / t_r)
            step = g / (1.0 - drow_dv)
            step = np.where(np.isfinite(step), step, 0.0)
            v = v + step
            uv = pixels(v, sel)
            ok = np.isfinite(uv[:, 0])
            sel, v, uv = sel[ok], v[ok], uv[ok]
    in_img = intr.in_image(uv, margin)
    sel, uv = sel[in_img], uv[in_img]
    rng = np.random.default_rng(seed)
    noisy = uv + rng.normal(0.0, pixel_sigma, uv.shape) if pixel_sigma > 0 else uv.copy()
    inside = intr.in_image(noisy, margin)
    return FrameObservations(ids[sel[inside]], noisy[inside], cam)


class DetectionModel:
    """Two-state Markov detector that shortens feature tracks.

    A landmark detected in the previous frame stays detected with probability
    ``p_keep``; an undetected one becomes detected with probability ``p_new``.
    Both switching rates scale with ``activity`` in [0, 1], so a camera at
    rest keeps its detections.
    """

    def __init__(self, n_landmarks: int, p_keep: float = 0.85, p_new: float = 0.1, seed: int = 0):
        self.p_keep, self.p_new = p_keep, p_new
        self.rng = np.random.default_rng(seed)
        self.state = self.rng.random(n_landmarks) < p_new / (p_new + 1.0 - p_keep)

    def step(self, obs: FrameObservations, activity: float = 1.0) -> FrameObservations:
        u = self.rng.random(len(self.state))
        p_drop, p_new = (1.0 - self.p_keep) * activity, self.p_new * activity
        self.state = np.where(self.state, u >= p_drop, u < p_new)
        keep = self.state[obs.ids]
        return FrameObservations(obs.ids[keep], obs.uv[keep], obs.cam)


# --------------------------------------------------------------------------
# complete datasets

@dataclass
class Frame:
    index: int
    raw_stamp: float          # camera clock
    true_epoch: float         # IMU-clock epoch of the central row
    observations: list        # one FrameObservations per camera


@dataclass
class Dataset:
    trajectory: Trajectory
    scene: Scene
    imu: ImuData
    frames: list
    imu_params: ImuParams
    cams: list
    noise: ImuNoise | None = None
    meta: dict = field(default_factory=dict)


def make_dataset(spec: TrajectorySpec, imu_params: ImuParams, cams, noise: ImuNoise | None,
                 seed: int, *, density: int = 150, half_extent: float = 7.0,
                 wall_height: float = 5.0, frame_rate: float = 10.0, pixel_sigma: float = 1.0,
                 detection: tuple[float, float] | None = (0.85, 0.1), t_first: float = 0.1,
                 scene_seed: int | None = None) -> Dataset:
    """Scene, IMU stream and frames for one simulated run.

    Frames are placed so that their central-row epochs fall on a regular grid
    starting at ``t_first``; the last frame leaves room for the readout time.
    """
    ss = np.random.SeedSequence(seed)
    s_scene, s_imu, s_pix, s_det = ss.spawn(4)
    traj = Trajectory(spec)
    scene = make_scene(int(s_scene.generate_state(1)[0]) if scene_seed is None else scene_seed,
                       density, half_extent, wall_height)
    imu = synthesize_imu(traj, imu_params, noise, seed=int(s_imu.generate_state(1)[0]))
    detectors = [DetectionModel(len(scene.landmarks), *detection,
                                seed=int(s_det.generate_state(1)[0]) + k)
                 if detection is not None else None for k in range(len(cams))]
    pix_rng = np.random.default_rng(s_pix)
    margin_t = max(c.temporal.t_r for c in cams) + 0.06
    epochs = np.arange(t_first, spec.duration - margin_t, 1.0 / frame_rate)
    frames = []
    # detections only churn while the camera moves
    speed = np.linalg.norm(traj.sample(epochs, check=False).v, axis=1)
    activity = np.clip(speed / (0.25 * spec.speed), 0.0, 1.0)
    for i, te in enumerate(epochs):
        obs_all = []
        for k, c in enumerate(cams):
            raw = te - c.temporal.t_d
            obs = synthesize_frame(traj, scene, cams, raw, int(pix_rng.integers(2 ** 63)),
                                   cam=k, pixel_sigma=pixel_sigma)
            if detectors[k] is not None:
                obs = detectors[k].step(obs, activity[i])
            obs_all.append(obs)
        frames.append(Frame(i, te - cams[0].temporal.t_d, te, obs_all))
    return Dataset(traj, scene, imu, frames, imu_params, cams, noise)


def write_tum(path, stamps, positions, rotations) -> None:
    """Write ``t tx ty tz qx qy qz qw`` lines; ``rotations`` are :class:`Rotation` or 3x3."""
    with open(path, "w") as fh:
        for t, p, R in zip(stamps, positions, rotations):
            q = R.quat if isinstance(R, Rotation) else Rotation.from_matrix(R).quat
            fh.write(f"{t:.9f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                     f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


def read_tum(path):
    """``(stamps, positions, quaternions_xyzw)`` from a TUM trajectory file."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(x) for x in line.replace(",", " ").split()[:8]])
    arr = np.array(rows, dtype=float).reshape(-1, 8)
    return arr[:, 0], arr[:, 1:4], arr[:, 4:8]
