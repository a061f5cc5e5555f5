"""Consistency and accuracy metrics.

Errors are taken as estimate minus truth, with the rotation part
``log(R_est R_true^T)`` so that position and orientation share the left
(world-frame) perturbation convention of the filter.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .manifold import Rotation, exp_matrix, so3_log

log = logging.getLogger(__name__)

COMPONENTS = {"position": slice(0, 3), "orientation": slice(3, 6), "pose": slice(0, 6)}
DEFAULT_INTERVALS = (4.0, 6.0, 8.0, 10.0, 12.0)
MAX_CONDITION = 1e12


def rotation_error(R_est, R_true) -> np.ndarray:
    """``log(R_est R_true^T)`` for single matrices or stacks of them."""
    R_est, R_true = np.asarray(R_est), np.asarray(R_true)
    if R_est.ndim == 2:
        return so3_log(Rotation.from_matrix(R_est @ R_true.T))
    return np.array([so3_log(Rotation.from_matrix(a @ b.T)) for a, b in zip(R_est, R_true)])


def pose_error(p_est, R_est, p_true, R_true) -> np.ndarray:
    """6-vector (or ``(n, 6)``) error ``[p_est - p_true, log(R_est R_true^T)]``."""
    dp = np.asarray(p_est, dtype=float) - np.asarray(p_true, dtype=float)
    return np.concatenate([dp, rotation_error(R_est, R_true)], axis=-1)


@dataclass
class RunResult:
    """Per-epoch errors and covariances of one run.

    ``errors`` is ``(n, 6)`` ordered ``[position, orientation]`` and ``cov`` the
    matching ``(n, 6, 6)`` covariance.  ``param_errors`` maps parameter block
    names to ``(n, k)`` error arrays.
    """

    epochs: np.ndarray
    errors: np.ndarray
    cov: np.ndarray
    param_errors: dict = field(default_factory=dict)
    success: bool = True

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=float)
        self.errors = np.asarray(self.errors, dtype=float).reshape(-1, 6)
        self.cov = np.asarray(self.cov, dtype=float).reshape(-1, 6, 6)
        if not (len(self.epochs) == len(self.errors) == len(self.cov)):
            raise ValueError("epochs, errors and covariances must be aligned")


def _stack(runs, attr):
    lengths = {len(getattr(r, attr)) for r in runs}
    if len(lengths) != 1:
        raise ValueError("runs must share the same epochs")
    return np.stack([getattr(r, attr) for r in runs])


def nees(runs, component: str = "pose") -> np.ndarray:
    """Average NEES over runs per epoch; epochs with singular covariance give NaN."""
    if not runs:
        raise ValueError("at least one run is required")
    sl = COMPONENTS[component]
    E = _stack(runs, "errors")[:, :, sl]
    C = _stack(runs, "cov")[:, :, sl, sl]
    out = np.full(E.shape[1], np.nan)
    skipped = 0
    for t in range(E.shape[1]):
        vals = []
        for e, c in zip(E[:, t], C[:, t]):
            if not np.all(np.isfinite(c)) or np.linalg.cond(c) >= MAX_CONDITION:
                continue
            vals.append(float(e @ np.linalg.solve(c, e)))
        if len(vals) == len(E):
            out[t] = np.mean(vals)
        elif np.any(E[:, t]):
            skipped += 1
        else:
            out[t] = 0.0
    if skipped:
        log.warning("%d epochs skipped in %s NEES due to singular covariance", skipped, component)
    return out


def rmse(errors) -> np.ndarray:
    """RMSE curve from ``(runs, epochs, k)`` (or ``(runs, epochs)``) errors."""
    E = np.asarray(errors, dtype=float)
    if E.ndim == 2:
        E = E[:, :, None]
    return np.sqrt(np.mean(np.sum(E * E, axis=2), axis=0))


def component_rmse(runs, component: str = "position") -> np.ndarray:
    if component in COMPONENTS:
        return rmse(_stack(runs, "errors")[:, :, COMPONENTS[component]])
    return rmse(np.stack([r.param_errors[component] for r in runs]))


def windowed_mean(epochs, values, window: float = 10.0) -> float:
    """Mean of ``values`` over the last ``window`` seconds (NaNs ignored)."""
    epochs = np.asarray(epochs, dtype=float)
    values = np.asarray(values, dtype=float)
    sel = epochs >= epochs[-1] - window
    v = values[sel]
    v = v[np.isfinite(v)]
    return float(v.mean()) if len(v) else float("nan")


# --------------------------------------------------------------------------
# trajectory alignment and accuracy

class Alignment(NamedTuple):
    yaw: float
    translation: np.ndarray
    degenerate: bool

    def rotation(self) -> np.ndarray:
        return exp_matrix(np.array([0.0, 0.0, self.yaw]))

    def apply(self, p, R=None):
        Rz = self.rotation()
        p2 = np.asarray(p, dtype=float) @ Rz.T + self.translation
        if R is None:
            return p2
        return p2, np.einsum("ij,njk->nik", Rz, np.asarray(R, dtype=float))


def align_4dof(p_est, p_true) -> Alignment:
    """Yaw and translation minimizing ``sum |R_z(yaw) p_est + t - p_true|^2``."""
    p_est = np.asarray(p_est, dtype=float).reshape(-1, 3)
    p_true = np.asarray(p_true, dtype=float).reshape(-1, 3)
    if len(p_est) < 2 or len(p_est) != len(p_true):
        raise ValueError("alignment needs at least two corresponding positions")
    me, mt = p_est.mean(axis=0), p_true.mean(axis=0)
    a, b = p_est - me, p_true - mt
    s = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    c = np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    degenerate = np.hypot(s, c) < 1e-12 * max(1.0, np.sum(a[:, :2] ** 2))
    yaw = 0.0 if degenerate else float(np.arctan2(s, c))
    Rz = exp_matrix(np.array([0.0, 0.0, yaw]))
    return Alignment(yaw, mt - Rz @ me, bool(degenerate))


def ate(p_est, p_true) -> float:
    """RMS position error after 4-DOF alignment."""
    al = align_4dof(p_est, p_true)
    d = al.apply(p_est) - np.asarray(p_true, dtype=float)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


class RelativeErrors(NamedTuple):
    rre: float                   # deg / m, mean over intervals
    rte: float                   # percent, mean over intervals
    per_interval: dict           # d -> (rre, rte, segment count)
    empty: bool


def relative_errors(p_est, R_est, p_true, R_true, intervals=DEFAULT_INTERVALS) -> RelativeErrors:
    """Mean relative rotation (deg/m) and translation (%) errors over distance intervals.

    Segments start at every pose and end at the first pose whose travelled
    ground-truth distance reaches the interval length.
    """
    p_est, p_true = np.asarray(p_est, float), np.asarray(p_true, float)
    R_est, R_true = np.asarray(R_est, float), np.asarray(R_true, float)
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p_true, axis=0), axis=1))])
    per = {}
    for d in intervals:
        ends = np.searchsorted(dist, dist + d, side="left")
        starts = np.flatnonzero(ends < len(dist))
        if len(starts) == 0:
            continue
        rot, tra = [], []
        for i in starts:
            j = ends[i]
            dR_t = R_true[i].T @ R_true[j]
            dR_e = R_est[i].T @ R_est[j]
            dt_t = R_true[i].T @ (p_true[j] - p_true[i])
            dt_e = R_est[i].T @ (p_est[j] - p_est[i])
            # E = inv(dT_true) dT_est
            E_R = dR_t.T @ dR_e
            E_t = dR_t.T @ (dt_e - dt_t)
            rot.append(np.degrees(np.linalg.norm(so3_log(Rotation.from_matrix(E_R)))))
            tra.append(np.linalg.norm(E_t))
        per[float(d)] = (float(np.mean(rot)) / d, 100.0 * float(np.mean(tra)) / d, len(starts))
    if not per:
        return RelativeErrors(float("nan"), float("nan"), {}, True)
    rre = float(np.mean([v[0] for v in per.values()]))
    rte = float(np.mean([v[1] for v in per.values()]))
    return RelativeErrors(rre, rte, per, False)


class TrajectoryReport(NamedTuple):
    ate: float
    rre: float
    rte: float
    matched: int
    alignment: Alignment
    relative: RelativeErrors


def associate(t_est, t_true, max_dt: float = 0.005):
    """Index pairs of nearest-neighbour stamps closer than ``max_dt``."""
    t_est, t_true = np.asarray(t_est, float), np.asarray(t_true, float)
    order = np.argsort(t_true)
    ts = t_true[order]
    j = np.clip(np.searchsorted(ts, t_est), 1, max(len(ts) - 1, 1))
    lo = np.clip(j - 1, 0, len(ts) - 1)
    hi = np.clip(j, 0, len(ts) - 1)
    pick = np.where(np.abs(ts[lo] - t_est) <= np.abs(ts[hi] - t_est), lo, hi)
    ok = np.abs(ts[pick] - t_est) <= max_dt
    return np.flatnonzero(ok), order[pick[ok]]


def evaluate_trajectories(t_est, p_est, q_est, t_true, p_true, q_true,
                          intervals=DEFAULT_INTERVALS, max_dt: float = 0.005) -> TrajectoryReport:
    """ATE, RRE and RTE of an estimate against ground truth (quaternions x, y, z, w)."""
    if len(t_est) == 0 or len(t_true) == 0 or (
            max(t_est[0], np.min(t_true)) > min(t_est[-1], np.max(t_true)) + max_dt):
        raise ValueError("trajectories do not overlap in time")
    ie, it = associate(t_est, t_true, max_dt)
    if len(ie) < 2:
        raise ValueError("fewer than two associated poses")
    Re = np.array([Rotation(q).matrix() for q in np.asarray(q_est)[ie]])
    Rt = np.array([Rotation(q).matrix() for q in np.asarray(q_true)[it]])
    pe, pt = np.asarray(p_est)[ie], np.asarray(p_true)[it]
    al = align_4dof(pe, pt)
    pa, Ra = al.apply(pe, Re)
    d = pa - pt
    a = float(np.sqrt(np.mean(np.sum(d * d, axis=1))))
    rel = relative_errors(pa, Ra, pt, Rt, intervals)
    return TrajectoryReport(a, rel.rre, rel.rte, len(ie), al, rel)


def evaluate_files(est_path, truth_path, intervals=DEFAULT_INTERVALS,
                   max_dt: float = 0.005) -> TrajectoryReport:
    from .sim import read_tum
    te, pe, qe = read_tum(est_path)
    tt, pt, qt = read_tum(truth_path)
    return evaluate_trajectories(te, pe, qe, tt, pt, qt, intervals, max_dt)


# --------------------------------------------------------------------------
# CSV output

def write_nees_csv(path, epochs, pos, rot, pose) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "nees_pos", "nees_rot", "nees_pose"])
        for row in zip(epochs, pos, rot, pose):
            w.writerow([f"{x:.9g}" for x in row])


def write_rmse_csv(path, param: str, epochs, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "epoch", "rmse"])
        for t, v in zip(epochs, values):
            w.writerow([param, f"{t:.9g}", f"{v:.9g}"])
