import numpy as np
import pytest

from ksf.manifold import exp_matrix, so3_exp
from ksf.metrics import (RunResult, align_4dof, ate, associate, component_rmse, evaluate_files,
                         evaluate_trajectories, nees, pose_error, relative_errors, rmse,
                         rotation_error, windowed_mean, write_nees_csv, write_rmse_csv)
from ksf.manifold import Rotation
from trajectories import (lateral_drift, rigidly_moved, save, straight_path, wavy_path,
                          yaw_drift)


def random_cov(rng, n=6):
    A = rng.normal(size=(n, n))
    return A @ A.T + n * np.eye(n)


# --------------------------------------------------------------------------
# NEES and RMSE

def test_zero_errors_give_zero_nees(rng):
    C = np.stack([random_cov(rng) for _ in range(5)])
    runs = [RunResult(np.arange(5.0), np.zeros((5, 6)), C) for _ in range(3)]
    for comp in ("position", "orientation", "pose"):
        np.testing.assert_array_equal(nees(runs, comp), 0.0)
    np.testing.assert_array_equal(component_rmse(runs, "position"), 0.0)


def test_nees_sampling_oracle(rng):
    C = random_cov(rng)
    L = np.linalg.cholesky(C)
    runs = [RunResult([0.0], (L @ rng.normal(size=6))[None], C[None]) for _ in range(10000)]
    assert nees(runs, "pose")[0] == pytest.approx(6.0, rel=0.03)
    assert nees(runs, "position")[0] == pytest.approx(3.0, rel=0.03)
    assert nees(runs, "orientation")[0] == pytest.approx(3.0, rel=0.03)


def test_pose_nees_splits_for_block_diagonal_covariance(rng):
    C = np.zeros((6, 6))
    C[:3, :3], C[3:, 3:] = random_cov(rng, 3), random_cov(rng, 3)
    runs = [RunResult([0.0], rng.normal(size=(1, 6)), C[None]) for _ in range(5)]
    assert nees(runs, "pose")[0] == pytest.approx(nees(runs, "position")[0]
                                                  + nees(runs, "orientation")[0], rel=1e-12)


def test_singular_covariance_epoch_is_skipped(rng):
    C = np.stack([random_cov(rng), np.zeros((6, 6))])
    runs = [RunResult([0.0, 1.0], np.ones((2, 6)), C)]
    out = nees(runs, "pose")
    assert np.isfinite(out[0]) and np.isnan(out[1])


def test_rmse_examples(rng):
    assert rmse(np.array([[[-0.3]]]))[0] == pytest.approx(0.3)
    E = rng.normal(0.0, 0.2, (1000, 1, 3))
    assert rmse(E)[0] == pytest.approx(0.2 * np.sqrt(3), rel=0.05)
    assert np.all(rmse(np.zeros((4, 7, 2))) == 0.0)


def test_parameter_rmse_and_window():
    runs = [RunResult([0.0, 1.0], np.zeros((2, 6)), np.stack([np.eye(6)] * 2),
                      {"b_g": np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 1.0]])})]
    np.testing.assert_allclose(component_rmse(runs, "b_g"), [5.0, 1.0])
    ep = np.arange(0.0, 30.0, 0.1)
    assert windowed_mean(ep, np.where(ep >= 19.9, 2.0, 100.0)) == pytest.approx(2.0)
    assert windowed_mean(ep, np.where(ep >= 25.0, np.nan, 1.0), window=2.0) != windowed_mean(ep, ep)


def test_run_result_alignment_check():
    with pytest.raises(ValueError):
        RunResult([0.0, 1.0], np.zeros((1, 6)), np.zeros((2, 6, 6)))
    with pytest.raises(ValueError):
        nees([])


def test_error_convention_is_estimate_minus_truth():
    R = so3_exp(np.array([0.0, 0.0, 0.1])).matrix()
    e = pose_error([1.0, 0.0, 0.0], R, np.zeros(3), np.eye(3))
    np.testing.assert_allclose(e, [1.0, 0.0, 0.0, 0.0, 0.0, 0.1], atol=1e-15)
    np.testing.assert_allclose(rotation_error(np.eye(3), R), [0.0, 0.0, -0.1], atol=1e-15)


# --------------------------------------------------------------------------
# alignment and ATE

def test_alignment_recovers_rigid_transform():
    _, p, _ = wavy_path()
    moved, _ = rigidly_moved(p, np.repeat(np.eye(3)[None], len(p), 0))
    al = align_4dof(p, moved)
    assert al.yaw == pytest.approx(np.radians(30.0), abs=1e-10)
    np.testing.assert_allclose(al.translation, [1.0, 2.0, 3.0], atol=1e-10)
    assert ate(p, moved) < 1e-10


def test_alignment_identity():
    _, p, _ = wavy_path()
    al = align_4dof(p, p)
    assert al.yaw == 0.0 and np.allclose(al.translation, 0.0)


def test_alignment_beats_grid_search(rng):
    for seed in range(10):
        _, p, _ = wavy_path(201, seed=seed)
        q = p + rng.normal(0, 0.3, p.shape)
        q = q @ exp_matrix(np.array([0.0, 0.0, rng.uniform(-3, 3)])).T + rng.normal(0, 5, 3)
        al = align_4dof(p, q)

        def cost(yaw):
            Rz = exp_matrix(np.array([0.0, 0.0, yaw]))
            pe = p @ Rz.T
            t = (q - pe).mean(axis=0)
            return np.sum((pe + t - q) ** 2)

        best = cost(al.yaw)
        assert all(best <= cost(np.radians(y)) + 1e-9 for y in np.arange(0.0, 360.0, 0.1))


def test_degenerate_alignment_flag():
    p = np.ones((5, 3))
    al = align_4dof(p, p + 1.0)
    assert al.degenerate and al.yaw == 0.0
    with pytest.raises(ValueError):
        align_4dof(p[:1], p[:1])


def test_aligned_ate_not_worse_than_translation_only(rng):
    _, p, _ = wavy_path(401)
    q = p @ exp_matrix(np.array([0.0, 0.0, 0.2])).T + rng.normal(0, 0.1, p.shape)
    d = p + (q - p).mean(axis=0) - q
    assert ate(p, q) <= np.sqrt(np.mean(np.sum(d * d, axis=1)))


# --------------------------------------------------------------------------
# relative errors

def test_relative_errors_self_and_offset():
    _, p, R = wavy_path()
    r = relative_errors(p, R, p, R)
    assert r.rre == pytest.approx(0.0, abs=1e-9) and r.rte == pytest.approx(0.0, abs=1e-9)
    r = relative_errors(p + [0.3, -0.2, 1.0], R, p, R)
    assert r.rre == pytest.approx(0.0, abs=1e-9) and r.rte == pytest.approx(0.0, abs=1e-9)


def test_relative_errors_invariant_to_rigid_transform(rng):
    _, p, R = wavy_path()
    pe = p + rng.normal(0, 0.05, p.shape)
    Re = np.array([so3_exp(rng.normal(0, 0.01, 3)).matrix() @ r for r in R])
    a = relative_errors(pe, Re, p, R)
    T = so3_exp(rng.normal(size=3)).matrix()
    b = relative_errors(pe @ T.T + rng.normal(size=3), T @ Re, p, R)
    assert b.rre == pytest.approx(a.rre, rel=1e-9)
    assert b.rte == pytest.approx(a.rte, rel=1e-9)


@pytest.mark.parametrize("eps", [0.1, 0.5, 2.0])
def test_yaw_drift_oracle(eps):
    _, p, R = wavy_path(4001)
    r = relative_errors(p, yaw_drift(p, R, eps), p, R)
    assert r.rre == pytest.approx(eps, rel=0.01)


def test_short_trajectory_flags_empty():
    _, p, R = straight_path(11, length=2.0)
    r = relative_errors(p, R, p, R)
    assert r.empty and np.isnan(r.rre)


# --------------------------------------------------------------------------
# file-level evaluation

def test_evaluate_file_against_itself(tmp_path):
    t, p, R = wavy_path()
    f = save(tmp_path / "a.tum", t, p, R)
    rep = evaluate_files(f, f)
    assert rep.ate == pytest.approx(0.0, abs=1e-8)
    assert rep.rre == pytest.approx(0.0, abs=1e-6)
    assert rep.rte == pytest.approx(0.0, abs=1e-6)
    assert rep.matched == len(t)


def test_evaluate_rigidly_moved_truth(tmp_path):
    t, p, R = wavy_path()
    pm, Rm = rigidly_moved(p, R)
    rep = evaluate_files(save(tmp_path / "e.tum", t, pm, Rm), save(tmp_path / "t.tum", t, p, R))
    assert rep.ate == pytest.approx(0.0, abs=1e-7)
    assert rep.alignment.yaw == pytest.approx(np.radians(-30.0), abs=1e-8)


def test_evaluate_constructed_drift(tmp_path):
    t, p, R = straight_path()
    rep = evaluate_files(save(tmp_path / "e.tum", t, lateral_drift(p, 0.005), R),
                         save(tmp_path / "t.tum", t, p, R))
    assert rep.rte == pytest.approx(0.5, abs=0.01)


def test_evaluate_errors(tmp_path):
    t, p, R = straight_path(101)
    a = save(tmp_path / "a.tum", t, p, R)
    b = save(tmp_path / "b.tum", t + 100.0, p, R)
    with pytest.raises(ValueError):
        evaluate_files(a, b)
    c = save(tmp_path / "c.tum", t[:1], p[:1], R[:1])
    with pytest.raises(ValueError):
        evaluate_files(c, a)


def test_association_nearest_within_tolerance():
    ie, it = associate([0.0, 1.0, 2.0, 3.0], [3.004, 0.001, 1.2, 2.0])
    assert ie.tolist() == [0, 2, 3] and it.tolist() == [1, 3, 0]


def test_evaluate_matches_direct_computation(rng):
    t, p, R = wavy_path(801)
    pe = p + rng.normal(0, 0.02, p.shape)
    q = np.array([Rotation.from_matrix(r).quat for r in R])
    rep = evaluate_trajectories(t, pe, q, t, p, q)
    assert rep.ate == pytest.approx(ate(pe, p), rel=1e-12)


def test_metric_csv_headers(tmp_path):
    write_nees_csv(tmp_path / "n.csv", [0.0], [1.0], [2.0], [3.0])
    write_rmse_csv(tmp_path / "r.csv", "b_g", [0.0], [0.5])
    assert (tmp_path / "n.csv").read_text().splitlines() == ["epoch,nees_pos,nees_rot,nees_pose",
                                                           "0,1,2,3"]
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "param,epoch,rmse"
