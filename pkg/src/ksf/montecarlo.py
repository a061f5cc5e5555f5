"""Single simulated runs and Monte-Carlo campaigns.

Run ``i`` of a campaign uses seed ``base_seed + i`` for both the synthetic
data and the initial-estimate draw, so campaigns are reproducible and runs
are independent of the number of worker processes.
"""
from __future__ import annotations

import csv
import logging
import multiprocessing
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import ExtrinsicKind
from .config import ExperimentConfig
from .estimator import FilterState, KeyframeFilter, apply_correction, make_state
from .imu import NAV_DIM, ImuModel, write_imu_csv
from .manifold import NavState, Rotation, so3_log
from .metrics import RunResult, component_rmse, nees, windowed_mean, write_nees_csv, write_rmse_csv
from .sim import make_dataset, write_tum

log = logging.getLogger(__name__)

MAX_FINAL_POSITION_ERROR = 100.0   # m


# --------------------------------------------------------------------------
# state export

def state_header(st: FilterState) -> list[str]:
    cols = ["epoch", "px", "py", "pz", "qx", "qy", "qz", "qw", "vx", "vy", "vz",
            "bgx", "bgy", "bgz", "bax", "bay", "baz"]
    if st.imu.model is ImuModel.GENERIC:
        for name in ("Tg", "Ts", "Ta"):
            cols += [f"{name}{i}{j}" for i in range(3) for j in range(3)]
    for k, c in enumerate(st.cams):
        cols += [f"cam{k}_t{a}" for a in "xyz"]
        if c.extrinsics.kind is not ExtrinsicKind.MAIN_CAMERA_CENTRIC:
            cols += [f"cam{k}_q{a}" for a in "xyzw"]
        cols += [f"cam{k}_{n}" for n in ("fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2", "td", "tr")]
    cols += [f"sigma{i}" for i in range(NAV_DIM + st.param_dim)]
    return cols


def state_row(st: FilterState) -> list[float]:
    n = st.nav
    row = [n.epoch, *n.t_WB, *n.R_WB.quat, *n.v_WB, *st.imu.vector()]
    for c in st.cams:
        row += list(c.extrinsics.translation)
        if c.extrinsics.kind is not ExtrinsicKind.MAIN_CAMERA_CENTRIC:
            row += list(c.extrinsics.rotation.quat)
        row += list(c.intrinsics.vector()) + [c.temporal.t_d, c.temporal.t_r]
    m = NAV_DIM + st.param_dim
    row += list(np.sqrt(np.maximum(np.diag(st.P)[:m], 0.0)))
    return [float(x) for x in row]


def parameter_errors(st: FilterState, true_imu, true_cams) -> dict:
    """Estimate-minus-truth per parameter block (rotations as ``log(R_est R_true^T)``)."""
    out = {"b_g": st.imu.b_g - true_imu.b_g, "b_a": st.imu.b_a - true_imu.b_a}
    if st.imu.model is ImuModel.GENERIC:
        for name in ("T_g", "T_s", "T_a"):
            out[name] = (getattr(st.imu, name) - getattr(true_imu, name)).ravel()
    for k, (c, t) in enumerate(zip(st.cams, true_cams)):
        e = c.extrinsics.translation - t.extrinsics.translation
        if c.extrinsics.kind is not ExtrinsicKind.MAIN_CAMERA_CENTRIC:
            dR = c.extrinsics.rotation.matrix() @ t.extrinsics.rotation.matrix().T
            e = np.concatenate([e, so3_log(Rotation.from_matrix(dR))])
        out[f"cam{k}.extrinsics"] = e
        out[f"cam{k}.intrinsics"] = c.intrinsics.vector() - t.intrinsics.vector()
        out[f"cam{k}.t_d"] = np.array([c.temporal.t_d - t.temporal.t_d])
        out[f"cam{k}.t_r"] = np.array([c.temporal.t_r - t.temporal.t_r])
    return out


# --------------------------------------------------------------------------
# single run

@dataclass
class RunOutput:
    index: int
    seed: int
    result: RunResult | None
    final_position_error: float = float("nan")
    error: str | None = None
    keyframes: list = field(default_factory=list)     # frame ids that became keyframes

    @property
    def success(self) -> bool:
        return self.result is not None and self.result.success


def initial_state(cfg: ExperimentConfig, ds, rng) -> FilterState:
    """True pose, noisy velocity and parameters drawn around their true values."""
    true_imu, true_cams = ds.imu_params, ds.cams
    priors = cfg.priors()
    lock = tuple(cfg.filter.lock)
    probe = make_state(NavState(np.zeros(3), Rotation.identity(), np.zeros(3), 0.0),
                       true_imu, true_cams, priors, lock)
    sigma = np.sqrt(np.diag(probe.P))
    dx = rng.normal(size=len(sigma)) * sigma
    dx[:NAV_DIM] = 0.0
    apply_correction(probe, dx)
    f0 = ds.frames[0]
    t0 = f0.raw_stamp + probe.cams[0].temporal.t_d
    s = ds.trajectory.sample(t0)
    nav = NavState(s.p[0], Rotation.from_matrix(s.R[0]),
                   s.v[0] + rng.normal(0.0, cfg.init.velocity, 3), t0)
    return make_state(nav, probe.imu, probe.cams, priors, lock)


def simulate_run(cfg: ExperimentConfig, index: int = 0, out_dir=None, write_truth: bool = False,
                 dataset=None) -> RunOutput:
    """Synthesize one dataset, run the filter over it and record errors.

    Errors are sampled once per frame at the filter's navigation epoch and
    reported on the common grid of true frame epochs.
    """
    seed = cfg.seed + index
    ss_data, ss_init = np.random.SeedSequence(seed).spawn(2)
    data_seed = int(ss_data.generate_state(1)[0])
    if dataset is None:
        sc = cfg.scene
        dataset = make_dataset(cfg.trajectory_spec(), cfg.true_imu(), cfg.true_cameras(),
                               cfg.imu_noise(), data_seed, density=sc.density,
                               half_extent=sc.half_extent, wall_height=sc.wall_height,
                               frame_rate=sc.frame_rate, pixel_sigma=sc.pixel_sigma,
                               detection=tuple(sc.detection) if sc.detection else None)
    ds = dataset
    rng = np.random.default_rng(ss_init)
    st = initial_state(cfg, ds, rng)
    flt = KeyframeFilter(st, ds.imu, cfg.filter_config())
    n = len(ds.frames)
    grid = np.array([f.true_epoch for f in ds.frames])
    errors = np.full((n, 6), np.nan)
    cov = np.full((n, 6, 6), np.nan)
    perr: dict = {}
    tum, states, truth = [], [], []
    keyframes = []
    header = state_header(st)
    for i, f in enumerate(ds.frames):
        rep = flt.process_frame(f.index, f.raw_stamp, f.observations)
        if rep.keyframe:
            keyframes.append(f.index)
        s = flt.state
        tr = ds.trajectory.sample(s.nav.epoch)
        R_est = s.nav.R_WB.matrix()
        errors[i, :3] = s.nav.t_WB - tr.p[0]
        errors[i, 3:] = so3_log(Rotation.from_matrix(R_est @ tr.R[0].T))
        cov[i] = s.P[:6, :6]
        for name, e in parameter_errors(s, ds.imu_params, ds.cams).items():
            perr.setdefault(name, np.full((n, len(e)), np.nan))[i] = e
        tum.append((s.nav.epoch, s.nav.t_WB.copy(), R_est))
        truth.append((s.nav.epoch, tr.p[0], tr.R[0]))
        states.append(state_row(s))
    final = float(np.linalg.norm(errors[-1, :3]))
    ok = bool(np.isfinite(final) and final <= MAX_FINAL_POSITION_ERROR)
    result = RunResult(grid, errors, cov, perr, ok)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_tum(os.path.join(out_dir, "trajectory.tum"), *zip(*tum))
        with open(os.path.join(out_dir, "state.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows([[repr(x) for x in r] for r in states])
        if write_truth:
            write_tum(os.path.join(out_dir, "truth.tum"), *zip(*truth))
            write_imu_csv(os.path.join(out_dir, "imu.csv"), ds.imu)
    return RunOutput(index, seed, result, final, None, keyframes)


def _safe_run(args) -> RunOutput:
    cfg, index, out_dir = args
    try:
        return simulate_run(cfg, index, out_dir)
    except Exception as exc:   # a failed run is reported, never fatal to the campaign
        log.exception("run %d failed", index)
        return RunOutput(index, cfg.seed + index, None, float("nan"), f"{type(exc).__name__}: {exc}")


# --------------------------------------------------------------------------
# campaigns

@dataclass
class MetricReport:
    epochs: np.ndarray
    nees: dict                    # component -> per-epoch mean NEES
    rmse: dict                    # component or parameter block -> per-epoch RMSE
    runs: int
    successes: int
    failures: list                # (index, reason)
    last_window: dict = field(default_factory=dict)   # component -> last-10 s NEES mean

    def rmse_at(self, name: str, t: float) -> float:
        i = int(np.argmin(np.abs(self.epochs - t)))
        return float(self.rmse[name][i])


def aggregate(outputs, window: float = 10.0) -> MetricReport:
    ok = [o.result for o in outputs if o.success]
    failures = [(o.index, o.error or f"final position error {o.final_position_error:.3g} m")
                for o in outputs if not o.success]
    if not ok:
        raise RuntimeError(f"all {len(outputs)} runs failed")
    epochs = ok[0].epochs
    ne = {c: nees(ok, c) for c in ("position", "orientation", "pose")}
    rm = {c: component_rmse(ok, c) for c in ("position", "orientation")}
    for name in ok[0].param_errors:
        rm[name] = component_rmse(ok, name)
    last = {c: windowed_mean(epochs, v, window) for c, v in ne.items()}
    return MetricReport(epochs, ne, rm, len(outputs), len(ok), failures, last)


def write_report(report: MetricReport, out_dir) -> None:
    agg = os.path.join(out_dir, "aggregate")
    os.makedirs(agg, exist_ok=True)
    write_nees_csv(os.path.join(agg, "nees.csv"), report.epochs, report.nees["position"],
                   report.nees["orientation"], report.nees["pose"])
    for name, curve in report.rmse.items():
        write_rmse_csv(os.path.join(agg, f"rmse_{name}.csv"), name, report.epochs, curve)
    with open(os.path.join(agg, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerow(["runs", report.runs])
        w.writerow(["successes", report.successes])
        for c in ("position", "orientation", "pose"):
            w.writerow([f"nees_{c}_last10s", f"{report.last_window[c]:.9g}"])
        for name, curve in report.rmse.items():
            w.writerow([f"rmse_{name}_final", f"{curve[-1]:.9g}"])
        for idx, reason in report.failures:
            w.writerow([f"failed_run_{idx}", reason])


def run_montecarlo(cfg: ExperimentConfig, jobs: int = 1, out_dir=None) -> tuple[MetricReport, list]:
    """Run ``cfg.runs`` independent simulations and aggregate the successful ones."""
    cfg.validate()
    args = [(cfg, i, None if out_dir is None else os.path.join(out_dir, "runs", str(i)))
            for i in range(cfg.runs)]
    if jobs > 1 and cfg.runs > 1:
        ctx = multiprocessing.get_context("fork" if "fork" in multiprocessing.get_all_start_methods()
                                          else "spawn")
        with ctx.Pool(min(jobs, cfg.runs)) as pool:
            outputs = pool.map(_safe_run, args, chunksize=1)
    else:
        outputs = [_safe_run(a) for a in args]
    report = aggregate(outputs)
    if out_dir is not None:
        write_report(report, out_dir)
    return report, outputs
