"""IMU measurement models and strapdown propagation.

Error-state ordering used throughout the package::

    [dt_WB(3), dtheta_WB(3), dv_WB(3), db_g(3), db_a(3), vec(T_g), vec(T_s), vec(T_a)]

where ``vec`` stacks a matrix row by row and the three matrix blocks exist only
for the generic model.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import _kernels
from .manifold import (NavState, Rotation, exp_matrices, exp_matrix, right_jacobian,
                       right_jacobians, skew)

GRAVITY = 9.80665
NAV_DIM = 9
SUBSTEPS = 4          # integration steps per IMU sample interval


class InsufficientDataError(ValueError):
    """IMU readings do not cover the requested interval."""


class ConditioningError(np.linalg.LinAlgError):
    """A matrix that must be inverted is singular or badly conditioned."""


class ImuModel(str, enum.Enum):
    SIMPLE = "simple"
    GENERIC = "generic"


@dataclass
class ImuParams:
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    T_g: np.ndarray = field(default_factory=lambda: np.eye(3))
    T_s: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    T_a: np.ndarray = field(default_factory=lambda: np.eye(3))
    model: ImuModel = ImuModel.GENERIC

    def __post_init__(self):
        self.model = ImuModel(self.model)
        self.b_g = np.asarray(self.b_g, dtype=float).copy()
        self.b_a = np.asarray(self.b_a, dtype=float).copy()
        self.T_g = np.asarray(self.T_g, dtype=float).copy()
        self.T_s = np.asarray(self.T_s, dtype=float).copy()
        self.T_a = np.asarray(self.T_a, dtype=float).copy()

    @property
    def dim(self) -> int:
        return 6 if self.model is ImuModel.SIMPLE else 33

    def vector(self) -> np.ndarray:
        parts = [self.b_g, self.b_a]
        if self.model is ImuModel.GENERIC:
            parts += [self.T_g.ravel(), self.T_s.ravel(), self.T_a.ravel()]
        return np.concatenate(parts)

    def boxplus(self, delta) -> "ImuParams":
        delta = np.asarray(delta, dtype=float)
        out = self.copy()
        out.b_g = out.b_g + delta[0:3]
        out.b_a = out.b_a + delta[3:6]
        if self.model is ImuModel.GENERIC:
            out.T_g = out.T_g + delta[6:15].reshape(3, 3)
            out.T_s = out.T_s + delta[15:24].reshape(3, 3)
            out.T_a = out.T_a + delta[24:33].reshape(3, 3)
        return out

    def copy(self) -> "ImuParams":
        return ImuParams(self.b_g, self.b_a, self.T_g, self.T_s, self.T_a, self.model)

    def check(self) -> None:
        if self.model is ImuModel.SIMPLE:
            if not (np.array_equal(self.T_g, np.eye(3)) and np.array_equal(self.T_a, np.eye(3))
                    and not np.any(self.T_s)):
                raise ValueError("simple IMU model requires T_g = T_a = I and T_s = 0")
        for name in ("T_g", "T_a"):
            if np.linalg.cond(getattr(self, name)) >= 1e6:
                raise ConditioningError(f"{name} is singular or badly conditioned")


class ImuReading(NamedTuple):
    timestamp: float
    omega_m: np.ndarray
    a_m: np.ndarray


@dataclass
class ImuData:
    """A time-ordered block of IMU readings stored column-wise."""

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.gyro) == len(self.accel)):
            raise ValueError("timestamps, gyro and accel must have equal length")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0.0):
            raise ValueError("IMU timestamps must be strictly increasing")
        self._grid = None

    @property
    def grid(self) -> np.ndarray:
        """Integration nodes: every sample plus ``SUBSTEPS - 1`` evenly spaced points between."""
        if self._grid is None:
            if len(self.t) < 2:
                self._grid = self.t.copy()
            else:
                frac = np.arange(SUBSTEPS) / SUBSTEPS
                inner = (self.t[:-1, None] + np.diff(self.t)[:, None] * frac).ravel()
                self._grid = np.append(inner, self.t[-1])
        return self._grid

    @classmethod
    def from_readings(cls, readings) -> "ImuData":
        readings = list(readings)
        return cls(np.array([r.timestamp for r in readings]),
                   np.array([r.omega_m for r in readings]),
                   np.array([r.a_m for r in readings]))

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for i in range(len(self.t)):
            yield ImuReading(self.t[i], self.gyro[i], self.accel[i])

    def interpolate(self, times) -> tuple[np.ndarray, np.ndarray]:
        """Linearly interpolated gyro and accel readings at ``times``."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if len(self.t) == 0 or times.min() < self.t[0] - 1e-12 or times.max() > self.t[-1] + 1e-12:
            raise InsufficientDataError(
                f"IMU data [{self.t[0] if len(self.t) else np.nan}, "
                f"{self.t[-1] if len(self.t) else np.nan}] does not cover "
                f"[{times.min()}, {times.max()}]")
        i = np.clip(np.searchsorted(self.t, times, side="right") - 1, 0, max(len(self.t) - 2, 0))
        if len(self.t) == 1:
            return np.repeat(self.gyro, len(times), 0), np.repeat(self.accel, len(times), 0)
        t0, t1 = self.t[i], self.t[i + 1]
        w = ((times - t0) / (t1 - t0))[:, None]
        gyro = (1.0 - w) * self.gyro[i] + w * self.gyro[i + 1]
        accel = (1.0 - w) * self.accel[i] + w * self.accel[i + 1]
        return gyro, accel


def read_imu_csv(path) -> ImuData:
    """Read ``t, wx, wy, wz, ax, ay, az`` rows; a header line is optional."""
    lines = Path(path).read_text().splitlines()
    rows = []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([float(x) for x in line.split(",")])
        except ValueError:
            if rows:
                raise
            continue  # header
    arr = np.array(rows, dtype=float).reshape(-1, 7)
    return ImuData(arr[:, 0], arr[:, 1:4], arr[:, 4:7])


def write_imu_csv(path, data: ImuData) -> None:
    arr = np.column_stack([data.t, data.gyro, data.accel])
    np.savetxt(path, arr, delimiter=",", fmt="%.9f", header="t,wx,wy,wz,ax,ay,az", comments="")


@dataclass
class ImuNoise:
    """Continuous-time noise densities; defaults are the smartphone-grade simulation values."""

    sigma_g: float = 1.2e-3    # rad/s/sqrt(Hz)
    sigma_a: float = 8e-3      # m/s^2/sqrt(Hz)
    sigma_bg: float = 2e-5     # rad/s^2/sqrt(Hz)
    sigma_ba: float = 5.5e-5   # m/s^3/sqrt(Hz)
    rate: float = 100.0        # Hz

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba", "rate"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")


def model_apply(params: ImuParams, true_omega, true_accel_body):
    """Noise-free IMU readings for true body rate and specific force.

    Works on single 3-vectors or on ``(n, 3)`` arrays.
    """
    w = np.asarray(true_omega, dtype=float)
    a = np.asarray(true_accel_body, dtype=float)
    a_m = a @ params.T_a.T + params.b_a
    omega_m = w @ params.T_g.T + a @ params.T_s.T + params.b_g
    return omega_m, a_m


def model_invert(params: ImuParams, omega_m, a_m):
    """Body rate and specific force recovered from readings (inverse of :func:`model_apply`)."""
    Tg_inv, Ta_inv = _inverses(params)
    a = (np.asarray(a_m, dtype=float) - params.b_a) @ Ta_inv.T
    w = (np.asarray(omega_m, dtype=float) - params.b_g - a @ params.T_s.T) @ Tg_inv.T
    return w, a


def _inverses(params: ImuParams):
    if params.model is ImuModel.SIMPLE:
        return np.eye(3), np.eye(3)
    out = []
    for M in (params.T_g, params.T_a):
        if not np.all(np.isfinite(M)) or np.linalg.cond(M) >= 1e6:
            raise ConditioningError("IMU systematic-error matrix is singular")
        out.append(np.linalg.inv(M))
    return out[0], out[1]


def _signal_jacobians(params, Tg_inv, Ta_inv, w, a):
    """d(omega_hat)/d(x_imu) and d(a_hat)/d(x_imu) for one corrected sample."""
    m = params.dim
    Dw = np.zeros((3, m))
    Da = np.zeros((3, m))
    if params.model is ImuModel.SIMPLE:
        Dw[:, 0:3] = -np.eye(3)
        Da[:, 3:6] = -np.eye(3)
        return Dw, Da
    TgTs = Tg_inv @ params.T_s
    Da[:, 3:6] = -Ta_inv
    Da[:, 24:33] = -Ta_inv @ np.kron(np.eye(3), a[None, :])
    Dw[:, 0:3] = -Tg_inv
    Dw[:, 3:6] = -TgTs @ Da[:, 3:6]
    Dw[:, 6:15] = -Tg_inv @ np.kron(np.eye(3), w[None, :])
    Dw[:, 15:24] = -Tg_inv @ np.kron(np.eye(3), a[None, :])
    Dw[:, 24:33] = -TgTs @ Da[:, 24:33]
    return Dw, Da


def _nodes(data: ImuData, t0: float, t1: float) -> np.ndarray:
    lo, hi = min(t0, t1), max(t0, t1)
    if len(data) == 0 or lo < data.t[0] - 1e-9 or hi > data.t[-1] + 1e-9:
        raise InsufficientDataError(f"IMU readings do not cover [{lo}, {hi}]")
    grid = data.grid
    i0 = np.searchsorted(grid, lo, side="right")
    i1 = np.searchsorted(grid, hi, side="left")
    inner = grid[i0:i1]
    nodes = np.concatenate([[lo], inner, [hi]])
    return nodes if t1 >= t0 else nodes[::-1]


class PropagationResult(NamedTuple):
    state: NavState
    Phi: np.ndarray | None
    Q: np.ndarray | None
    omega_end: np.ndarray
    p_rate: np.ndarray       # d t_WB / d t_target of the discrete scheme
    theta_rate: np.ndarray   # world-frame rotation rate, d theta / d t_target


def integrate(state: NavState, params: ImuParams, data: ImuData, t_target: float,
              noise: ImuNoise | None = None, *, gravity: float = GRAVITY,
              jacobian: bool = True, compiled: bool = True) -> PropagationResult:
    """Propagate the mean with trapezoidal integration.

    Returns the new state, the error-state transition matrix over
    ``(nav, x_imu)``, the accumulated discrete process noise (``None`` when no
    noise is given) and the corrected body rate at ``t_target``.  Integration
    runs backwards when ``t_target < state.epoch``.  ``compiled=False``
    selects the plain numpy loop, kept as the reference route.
    """
    g = np.array([0.0, 0.0, -gravity])
    nodes = _nodes(data, state.epoch, t_target)
    gyro, accel = data.interpolate(nodes)
    Tg_inv, Ta_inv = _inverses(params)
    a_hat = (accel - params.b_a) @ Ta_inv.T
    w_hat = (gyro - params.b_g - a_hat @ params.T_s.T) @ Tg_inv.T
    if compiled and jacobian:
        return _integrate_compiled(state, params, nodes, w_hat, a_hat, Tg_inv, Ta_inv,
                                   noise, gravity, float(t_target))

    p = state.t_WB.copy()
    v = state.v_WB.copy()
    R = state.R_WB.matrix().copy()
    n = NAV_DIM + params.dim
    Phi = np.eye(n) if jacobian else None
    Q = np.zeros((n, n)) if (jacobian and noise is not None) else None
    if Q is not None:
        qg = noise.sigma_g ** 2 * Tg_inv @ Tg_inv.T
        qa = noise.sigma_a ** 2 * Ta_inv @ Ta_inv.T
    if jacobian:
        D_prev = _signal_jacobians(params, Tg_inv, Ta_inv, w_hat[0], a_hat[0])

    p_rate = v.copy()
    theta_rate = R @ w_hat[0]
    for k in range(len(nodes) - 1):
        dt = nodes[k + 1] - nodes[k]
        if dt == 0.0:
            continue
        w_mid = 0.5 * (w_hat[k] + w_hat[k + 1])
        R_next = R @ exp_matrix(w_mid * dt)
        fa = R @ a_hat[k]
        fb = R_next @ a_hat[k + 1]
        a_w = 0.5 * (fa + fb) + g
        if jacobian:
            Dw_b, Da_b = _signal_jacobians(params, Tg_inv, Ta_inv, w_hat[k + 1], a_hat[k + 1])
            Dw_a, Da_a = D_prev
            F = np.eye(n)
            Th_x = (R_next @ right_jacobian(w_mid * dt)) @ (0.5 * dt * (Dw_a + Dw_b))
            Sa, Sb = skew(fa), skew(fb)
            V_th = -0.5 * dt * (Sa + Sb)
            V_x = 0.5 * dt * (R @ Da_a + R_next @ Da_b) - 0.5 * dt * Sb @ Th_x
            F[3:6, 9:] = Th_x
            F[6:9, 3:6] = V_th
            F[6:9, 9:] = V_x
            F[0:3, 6:9] = dt * np.eye(3)
            F[0:3, 3:6] = 0.5 * dt * V_th
            F[0:3, 9:] = 0.5 * dt * V_x
            Phi = F @ Phi
            if Q is not None:
                adt = abs(dt)
                Qd = np.zeros((n, n))
                Qd[3:6, 3:6] = R_next @ qg @ R_next.T * adt
                Qd[6:9, 6:9] = R_next @ qa @ R_next.T * adt
                Qd[9:12, 9:12] = noise.sigma_bg ** 2 * adt * np.eye(3)
                Qd[12:15, 12:15] = noise.sigma_ba ** 2 * adt * np.eye(3)
                Q = F @ Q @ F.T + Qd
            D_prev = (Dw_b, Da_b)
        if k == len(nodes) - 2:
            # exact derivative of this last step w.r.t. its end time
            w_end = w_hat[k + 1]
            theta_rate = R_next @ (right_jacobian(w_mid * dt) @ w_end)
            a_dot = 0.5 * (np.cross(theta_rate, fb) + R_next @ ((a_hat[k + 1] - a_hat[k]) / dt))
            p_rate = v + a_w * dt + 0.5 * dt * dt * a_dot
        p = p + v * dt + 0.5 * a_w * dt * dt
        v = v + a_w * dt
        R = R_next

    out = NavState(p, Rotation.from_matrix(R), v, float(t_target))
    if Q is not None:
        Q = 0.5 * (Q + Q.T)
    return PropagationResult(out, Phi, Q, w_hat[-1].copy(), p_rate, theta_rate)


def _integrate_compiled(state, params, nodes, w_hat, a_hat, Tg_inv, Ta_inv, noise, gravity,
                        t_target) -> PropagationResult:
    n = NAV_DIM + params.dim
    Phi = np.empty((n, n))
    Q = np.empty((n, n))
    out = np.empty((7, 3))
    with_noise = noise is not None
    qg = noise.sigma_g ** 2 * Tg_inv @ Tg_inv.T if with_noise else np.zeros((3, 3))
    qa = noise.sigma_a ** 2 * Ta_inv @ Ta_inv.T if with_noise else np.zeros((3, 3))
    qbg = noise.sigma_bg ** 2 if with_noise else 0.0
    qba = noise.sigma_ba ** 2 if with_noise else 0.0
    _kernels.integrate_kernel(state.t_WB.astype(float), state.R_WB.matrix().copy(),
                              state.v_WB.astype(float), nodes, np.ascontiguousarray(w_hat),
                              np.ascontiguousarray(a_hat), params.model is ImuModel.GENERIC,
                              Tg_inv, Ta_inv, np.ascontiguousarray(params.T_s), qg, qa, qbg, qba,
                              with_noise, float(gravity), Phi, Q, out)
    nav = NavState(out[0].copy(), Rotation.from_matrix(out[4:7].copy()), out[1].copy(), t_target)
    if with_noise:
        Q = 0.5 * (Q + Q.T)
    return PropagationResult(nav, Phi, Q if with_noise else None, w_hat[-1].copy(),
                             out[2].copy(), out[3].copy())


def propagate(state: NavState, params: ImuParams, cov, readings, noise: ImuNoise | None,
              t_target: float, *, gravity: float = GRAVITY):
    """Propagate mean and joint ``(nav, x_imu)`` covariance to ``t_target``.

    Returns ``(state, cov, Phi)`` where ``Phi`` is the error-state transition
    matrix from ``state.epoch`` to ``t_target``.  ``noise=None`` propagates
    the covariance without process noise.
    """
    data = readings if isinstance(readings, ImuData) else ImuData.from_readings(readings)
    if t_target == state.epoch:
        n = NAV_DIM + params.dim
        return state.copy(), np.array(cov, dtype=float, copy=True), np.eye(n)
    res = integrate(state, params, data, t_target, noise, gravity=gravity)
    cov = np.asarray(cov, dtype=float)
    new_cov = res.Phi @ cov @ res.Phi.T
    if res.Q is not None:
        new_cov += res.Q
    return res.state, 0.5 * (new_cov + new_cov.T), res.Phi


def fej_transition(Phi: np.ndarray, p_end, v_end, p_fej, v_fej, dt: float,
                   gravity: float = GRAVITY) -> np.ndarray:
    """Re-evaluate the position/velocity vs. rotation blocks at first estimates.

    For the left rotation error these two blocks only depend on the start and
    end position and velocity, so substituting the first-estimate start values
    keeps the transition consistent with the previous interval.
    """
    g = np.array([0.0, 0.0, -gravity])
    out = Phi.copy()
    out[0:3, 3:6] = -skew(p_end - p_fej - v_fej * dt - 0.5 * g * dt * dt)
    out[6:9, 3:6] = -skew(v_end - v_fej - g * dt)
    return out


class MicroPropagation(NamedTuple):
    p: np.ndarray            # (n, 3)
    R: np.ndarray            # (n, 3, 3)
    v: np.ndarray            # (n, 3)
    p_rate: np.ndarray       # (n, 3)
    theta_rate: np.ndarray   # (n, 3)


def micro_propagate(state: NavState, params: ImuParams, data: ImuData, targets, *,
                    gravity: float = GRAVITY) -> MicroPropagation:
    """Mean-only propagation of ``state`` to many nearby epochs at once.

    Gives the same result as calling :func:`integrate` for every target, but
    shares the steps between IMU samples.  Used for per-observation poses of a
    rolling-shutter camera, where the targets lie within a few IMU periods.
    """
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    n = len(targets)
    g = np.array([0.0, 0.0, -gravity])
    t0 = state.epoch
    Tg_inv, Ta_inv = _inverses(params)
    out_p, out_v = np.empty((n, 3)), np.empty((n, 3))
    out_R = np.empty((n, 3, 3))
    out_pr, out_tr = np.empty((n, 3)), np.empty((n, 3))

    def corrected(times):
        gy, ac = data.interpolate(times)
        a = (ac - params.b_a) @ Ta_inv.T
        w = (gy - params.b_g - a @ params.T_s.T) @ Tg_inv.T
        return w, a

    w0, a0 = corrected([t0])
    R0 = state.R_WB.matrix()
    at0 = targets == t0
    if np.any(at0):
        out_p[at0], out_R[at0], out_v[at0] = state.t_WB, R0, state.v_WB
        out_pr[at0], out_tr[at0] = state.v_WB, R0 @ w0[0]

    for forward in (True, False):
        sel = np.flatnonzero(targets > t0) if forward else np.flatnonzero(targets < t0)
        if len(sel) == 0:
            continue
        far = targets[sel].max() if forward else targets[sel].min()
        nodes = _nodes(data, t0, far)[:-1]          # t0 and the samples strictly inside
        nw, na = corrected(nodes)
        p, v, R = state.t_WB.copy(), state.v_WB.copy(), R0.copy()
        tt = targets[sel]
        for k in range(len(nodes)):
            lo = nodes[k]
            hi = nodes[k + 1] if k + 1 < len(nodes) else far
            inside = (tt > lo) & (tt <= hi) if forward else (tt < lo) & (tt >= hi)
            if np.any(inside) or k + 1 < len(nodes):
                # reading slope over the sample interval holding this step
                t_mid = 0.5 * (lo + hi)
                i = np.clip(np.searchsorted(data.t, t_mid) - 1, 0, len(data.t) - 2)
                ta, tb = data.t[i], data.t[i + 1]
                wa_, aa_ = corrected([ta, tb])
                a_slope = (aa_[1] - aa_[0]) / (tb - ta)
            if np.any(inside):
                idx = sel[inside]
                te = tt[inside]
                dt = te - lo
                we, ae = corrected(te)
                wm = 0.5 * (nw[k] + we)
                phi = wm * dt[:, None]
                Re = R @ exp_matrices(phi)
                fa = R @ na[k]
                fb = np.einsum("nij,nj->ni", Re, ae)
                aw = 0.5 * (fa + fb) + g
                out_p[idx] = p + v * dt[:, None] + 0.5 * aw * (dt * dt)[:, None]
                out_v[idx] = v + aw * dt[:, None]
                out_R[idx] = Re
                tr = np.einsum("nij,nj->ni", Re, np.einsum("nij,nj->ni", right_jacobians(phi), we))
                a_dot = 0.5 * (np.cross(tr, fb) + np.einsum("nij,j->ni", Re, a_slope))
                out_tr[idx] = tr
                out_pr[idx] = v + aw * dt[:, None] + 0.5 * (dt * dt)[:, None] * a_dot
            if k + 1 < len(nodes):
                dt = nodes[k + 1] - lo
                wm = 0.5 * (nw[k] + nw[k + 1])
                Rn = R @ exp_matrix(wm * dt)
                aw = 0.5 * (R @ na[k] + Rn @ na[k + 1]) + g
                p = p + v * dt + 0.5 * aw * dt * dt
                v = v + aw * dt
                R = Rn
    return MicroPropagation(out_p, out_R, out_v, out_pr, out_tr)
