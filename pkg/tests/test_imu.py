import numpy as np
import pytest
from hypothesis import given, strategies as st

from ksf import _kernels
from ksf.imu import (GRAVITY, ConditioningError, ImuData, ImuModel, ImuNoise, ImuParams,
                     ImuReading, InsufficientDataError, SUBSTEPS, _inverses, fej_transition, integrate,
                     micro_propagate, model_apply, model_invert, propagate, read_imu_csv,
                     write_imu_csv)
from ksf.manifold import NavState, boxminus_nav, boxplus_nav, so3_exp
from ksf.sim import Trajectory, TrajectorySpec, synthesize_imu


def random_params(rng, model="generic", scale=1.0):
    if model == "simple":
        return ImuParams(rng.normal(0, 0.01, 3), rng.normal(0, 0.1, 3), model=model)
    return ImuParams(rng.normal(0, 0.01, 3), rng.normal(0, 0.1, 3),
                     np.eye(3) + scale * rng.normal(0, 0.02, (3, 3)),
                     scale * rng.normal(0, 0.002, (3, 3)),
                     np.eye(3) + scale * rng.normal(0, 0.02, (3, 3)), model=model)


def random_motion(rng, n=60, rate=100.0):
    """Smooth but non-trivial readings: sinusoids with random phases."""
    t = np.arange(n) / rate
    f = rng.uniform(0.5, 2.0, 6)
    ph = rng.uniform(0, 2 * np.pi, 6)
    sig = np.sin(2 * np.pi * f * t[:, None] + ph)
    gyro = 0.8 * sig[:, :3]
    accel = np.array([0.0, 0.0, GRAVITY]) + 2.0 * sig[:, 3:]
    return ImuData(t + 10.0, gyro, accel)


def random_state(rng, epoch):
    return NavState(rng.normal(size=3), so3_exp(rng.normal(size=3)), rng.normal(size=3), epoch)


# --------------------------------------------------------------------------
# measurement model

def test_model_apply_nominal_is_identity():
    w, a = np.array([0.1, -0.2, 0.3]), np.array([1.0, 2.0, 9.0])
    om, am = model_apply(ImuParams(), w, a)
    np.testing.assert_array_equal(om, w)
    np.testing.assert_array_equal(am, a)


def test_model_apply_g_sensitivity():
    p = ImuParams(T_s=0.001 * np.eye(3))
    om, _ = model_apply(p, np.zeros(3), [0.0, 0.0, 9.8])
    np.testing.assert_allclose(om, [0.0, 0.0, 0.0098], atol=1e-15)


def test_model_invert_bias_subtraction():
    p = ImuParams(b_a=np.array([0.1, 0.0, 0.0]))
    _, a = model_invert(p, np.zeros(3), [0.1, 0.0, 9.8])
    np.testing.assert_allclose(a, [0.0, 0.0, 9.8], atol=1e-15)
    w, a = model_invert(ImuParams(), [0.3, 0.2, 0.1], [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(w, [0.3, 0.2, 0.1])


def test_model_round_trip_1000_draws(rng):
    errs = []
    for _ in range(1000):
        p = random_params(rng)
        w, a = rng.normal(size=3), rng.normal(0, 5, 3)
        w2, a2 = model_invert(p, *model_apply(p, w, a))
        errs.append(max(np.abs(w2 - w).max(), np.abs(a2 - a).max()))
    assert max(errs) < 1e-10


def test_singular_systematic_matrix_rejected():
    p = ImuParams(T_g=np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(ConditioningError):
        model_invert(p, np.zeros(3), np.zeros(3))
    with pytest.raises(ConditioningError):
        p.check()


def test_simple_model_keeps_nominal_matrices():
    with pytest.raises(ValueError):
        ImuParams(T_g=2 * np.eye(3), model="simple").check()
    p = ImuParams(model="simple")
    assert p.dim == 6
    q = p.boxplus(np.arange(6.0))
    np.testing.assert_array_equal(q.T_g, np.eye(3))
    np.testing.assert_array_equal(q.b_a, [3.0, 4.0, 5.0])


def test_generic_vector_layout_is_row_major():
    p = ImuParams(T_g=np.arange(9.0).reshape(3, 3))
    np.testing.assert_array_equal(p.vector()[6:15], np.arange(9.0))
    d = np.zeros(33)
    d[6 + 1] = 1.0       # row 0, column 1
    assert p.boxplus(d).T_g[0, 1] == 2.0


def test_noise_must_be_positive():
    with pytest.raises(ValueError):
        ImuNoise(sigma_g=0.0)


def test_timestamps_strictly_increasing():
    with pytest.raises(ValueError):
        ImuData([0.0, 0.0], np.zeros((2, 3)), np.zeros((2, 3)))


def test_imu_csv_round_trip(tmp_path, rng):
    data = random_motion(rng, 20)
    write_imu_csv(tmp_path / "imu.csv", data)
    back = read_imu_csv(tmp_path / "imu.csv")
    np.testing.assert_allclose(back.t, data.t, atol=1e-9)
    np.testing.assert_allclose(back.gyro, data.gyro, atol=1e-9)
    (tmp_path / "nohdr.csv").write_text("0.0,1,2,3,4,5,6\n0.01,1,2,3,4,5,6\n")
    assert len(read_imu_csv(tmp_path / "nohdr.csv")) == 2


def test_readings_conversion():
    rd = [ImuReading(0.1 * i, np.ones(3) * i, np.zeros(3)) for i in range(4)]
    data = ImuData.from_readings(rd)
    assert len(data) == 4 and list(data)[2].omega_m[0] == 2.0


# --------------------------------------------------------------------------
# propagation

def test_zero_length_interval(rng):
    s = random_state(rng, 10.2)
    P = np.diag(rng.uniform(0.1, 1.0, 15))
    out, P2, Phi = propagate(s, ImuParams(model="simple"), P, random_motion(rng), ImuNoise(), 10.2)
    np.testing.assert_array_equal(Phi, np.eye(15))
    np.testing.assert_array_equal(P2, P)
    np.testing.assert_array_equal(out.t_WB, s.t_WB)


def test_stationary_body_one_second():
    t = np.arange(0.0, 1.0001, 0.01)
    data = ImuData(t, np.zeros((len(t), 3)), np.tile([0.0, 0.0, GRAVITY], (len(t), 1)))
    s = NavState(np.array([1.0, 2.0, 3.0]), so3_exp(np.zeros(3)), np.zeros(3), 0.0)
    res = integrate(s, ImuParams(), data, 1.0, None)
    np.testing.assert_allclose(res.state.t_WB, s.t_WB, atol=1e-9)
    np.testing.assert_allclose(res.state.v_WB, 0.0, atol=1e-9)
    np.testing.assert_allclose(res.state.R_WB.matrix(), np.eye(3), atol=1e-9)
    np.testing.assert_allclose(res.Phi[0:3, 6:9], np.eye(3) * 1.0, atol=1e-12)


def test_insufficient_data(rng):
    data = random_motion(rng, 10)
    s = random_state(rng, data.t[0])
    with pytest.raises(InsufficientDataError):
        integrate(s, ImuParams(), data, data.t[-1] + 0.5)


def _fd_transition(s, p, data, t1, h=1e-6):
    n = 9 + p.dim
    J = np.empty((9, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        outs = []
        for sgn in (1.0, -1.0):
            s2 = boxplus_nav(s, sgn * e[:9])
            p2 = p.boxplus(sgn * e[9:])
            outs.append(integrate(s2, p2, data, t1, jacobian=False).state)
        J[:, j] = boxminus_nav(outs[0], outs[1]) / (2 * h)
    return J


def column_relative_error(A, B, floor=1e-6):
    num = np.linalg.norm(A - B, axis=0)
    den = np.maximum(np.maximum(np.linalg.norm(A, axis=0), np.linalg.norm(B, axis=0)), floor)
    return num / den


@pytest.mark.parametrize("model", ["generic", "simple"])
def test_transition_matches_finite_differences_100_configs(model):
    rng = np.random.default_rng(7 if model == "generic" else 8)
    worst = 0.0
    for _ in range(100):
        data = random_motion(rng, 40)
        p = random_params(rng, model)
        t0 = data.t[0] + rng.uniform(0.0, 0.05)
        t1 = t0 + rng.uniform(0.02, 0.3)
        s = random_state(rng, t0)
        Phi = integrate(s, p, data, t1, ImuNoise()).Phi
        J = _fd_transition(s, p, data, t1)
        worst = max(worst, column_relative_error(Phi[:9], J).max())
        np.testing.assert_array_equal(Phi[9:], np.eye(9 + p.dim)[9:])
    assert worst < 1e-4, worst


def test_compiled_and_reference_routes_agree(rng):
    for model in ("generic", "simple"):
        for _ in range(10):
            data = random_motion(rng, 40)
            p = random_params(rng, model)
            s = random_state(rng, data.t[5] + 0.003)
            for t1 in (data.t[20] + 0.004, data.t[1]):
                a = integrate(s, p, data, t1, ImuNoise())
                b = integrate(s, p, data, t1, ImuNoise(), compiled=False)
                np.testing.assert_allclose(a.Phi, b.Phi, atol=1e-12)
                np.testing.assert_allclose(a.Q, b.Q, rtol=1e-10, atol=1e-18)
                np.testing.assert_allclose(a.state.t_WB, b.state.t_WB, atol=1e-13)
                np.testing.assert_allclose(a.p_rate, b.p_rate, atol=1e-12)
                np.testing.assert_allclose(a.theta_rate, b.theta_rate, atol=1e-12)


def test_semigroup_property(rng):
    data = synthesize_imu(Trajectory(TrajectorySpec("torus", duration=20.0)), ImuParams(),
                          ImuNoise(), seed=1)
    for _ in range(10):
        p = random_params(rng)
        t0 = rng.uniform(1.0, 15.0)
        s = random_state(rng, t0)
        t1 = t0 + rng.uniform(0.05, 0.3)
        t2 = t1 + rng.uniform(0.05, 0.3)
        r1 = integrate(s, p, data, t1)
        r2 = integrate(r1.state, p, data, t2)
        full = integrate(s, p, data, t2)
        err = np.linalg.norm(r2.Phi @ r1.Phi - full.Phi) / np.linalg.norm(full.Phi)
        assert err < 1e-6


def test_semigroup_exact_at_sample_nodes(rng):
    data = random_motion(rng, 60)
    p = random_params(rng)
    s = random_state(rng, data.t[0] + 0.002)
    r1 = integrate(s, p, data, data.t[20])
    r2 = integrate(r1.state, p, data, data.t[45] + 0.0061)
    full = integrate(s, p, data, data.t[45] + 0.0061)
    np.testing.assert_allclose(r2.Phi @ r1.Phi, full.Phi, atol=1e-13)


@given(st.floats(0.05, 0.95), st.floats(0.0, 0.3))
def test_semigroup_at_any_split(frac, start):
    rng = np.random.default_rng(11)
    data = random_motion(rng, 60)
    p = random_params(rng)
    t0 = data.t[0] + start
    t2 = t0 + 0.25
    t1 = t0 + frac * (t2 - t0)
    s = random_state(rng, t0)
    r1 = integrate(s, p, data, t1)
    r2 = integrate(r1.state, p, data, t2)
    full = integrate(s, p, data, t2)
    assert np.linalg.norm(r2.Phi @ r1.Phi - full.Phi) / np.linalg.norm(full.Phi) < 1e-6


def test_grid_subdivides_sample_intervals():
    data = ImuData([0.0, 0.01, 0.03], np.zeros((3, 3)), np.zeros((3, 3)))
    assert len(data.grid) == 2 * SUBSTEPS + 1
    np.testing.assert_allclose(np.diff(data.grid)[:SUBSTEPS], 0.01 / SUBSTEPS)
    assert set(data.t) <= set(data.grid)


def test_forward_backward_returns_initial_mean(rng):
    for _ in range(10):
        data = random_motion(rng, 60)
        p = random_params(rng)
        s = random_state(rng, data.t[3] + 0.004)
        fwd = integrate(s, p, data, data.t[50] + 0.001, jacobian=False).state
        back = integrate(fwd, p, data, s.epoch, jacobian=False).state
        np.testing.assert_allclose(boxminus_nav(back, s), 0.0, atol=1e-8)


def test_covariance_stays_psd_and_noise_free_congruence(rng):
    data = random_motion(rng, 60)
    p = random_params(rng)
    s = random_state(rng, data.t[0])
    A = rng.normal(size=(42, 42))
    P = A @ A.T * 1e-3
    _, P2, Phi = propagate(s, p, P, data, ImuNoise(), data.t[-1])
    w = np.linalg.eigvalsh(P2)
    assert w[0] >= -1e-12 * np.trace(P2)
    np.testing.assert_array_equal(P2, P2.T)
    _, P3, Phi3 = propagate(s, p, P, data, None, data.t[-1])
    np.testing.assert_allclose(P3, Phi3 @ P @ Phi3.T, rtol=1e-12, atol=1e-15)


def test_process_noise_first_order_scaling(rng):
    """Short interval: rotation noise ~ sigma_g^2 dt, bias noise = sigma_bg^2 dt."""
    data = random_motion(rng, 60)
    s = random_state(rng, data.t[0])
    noise = ImuNoise()
    res = integrate(s, ImuParams(), data, data.t[0] + 0.01, noise)
    # bias noise leaks in at O(sigma_bg^2 dt^3), about 1e-8 relative here
    np.testing.assert_allclose(np.trace(res.Q[3:6, 3:6]), 3 * noise.sigma_g ** 2 * 0.01, rtol=1e-6)
    np.testing.assert_allclose(np.diag(res.Q[9:12, 9:12]), noise.sigma_bg ** 2 * 0.01, rtol=1e-12)


def test_fej_transition_equals_plain_when_estimates_agree(rng):
    data = random_motion(rng, 40)
    p = random_params(rng)
    s = random_state(rng, data.t[0])
    res = integrate(s, p, data, data.t[30])
    dt = data.t[30] - data.t[0]
    out = fej_transition(res.Phi, res.state.t_WB, res.state.v_WB, s.t_WB, s.v_WB, dt)
    np.testing.assert_allclose(out, res.Phi, atol=1e-10)


def test_fej_transition_propagates_yaw_nullspace(rng):
    """Chained FEJ transitions map the gravity-yaw direction onto itself."""
    data = random_motion(rng, 60)
    p = ImuParams(model="simple")
    s = random_state(rng, data.t[0])
    g = np.array([0.0, 0.0, -GRAVITY])

    def null(p_, v_):
        N = np.zeros((15, 4))
        N[0:3, 0:3] = np.eye(3)
        ez = np.array([0.0, 0.0, 1.0])
        N[0:3, 3] = -np.cross(p_, ez) * -1.0
        N[0:3, 3] = np.cross(ez, p_)
        N[3:6, 3] = ez
        N[6:9, 3] = np.cross(ez, v_)
        return N

    mid = integrate(s, p, data, data.t[20])
    # a later update moves the estimate; FEJ keeps the propagated values
    moved = NavState(mid.state.t_WB + 0.05, mid.state.R_WB, mid.state.v_WB - 0.03, mid.state.epoch)
    end = integrate(moved, p, data, data.t[50])
    Phi2 = fej_transition(end.Phi, end.state.t_WB, end.state.v_WB, mid.state.t_WB, mid.state.v_WB,
                          data.t[50] - data.t[20])
    N_mid = null(mid.state.t_WB, mid.state.v_WB)
    N_end = null(end.state.t_WB, end.state.v_WB)
    np.testing.assert_allclose(Phi2 @ N_mid, N_end, atol=1e-9)
    assert np.allclose(g, [0, 0, -GRAVITY])


# --------------------------------------------------------------------------
# micro-propagation: three routes

def test_micro_propagation_routes_agree(rng):
    for model in ("generic", "simple"):
        for _ in range(5):
            data = random_motion(rng, 50)
            p = random_params(rng, model)
            s = random_state(rng, data.t[20] + 0.0041)
            targets = s.epoch + np.array([-0.023, -0.004, 0.0, 0.0021, 0.0137, 0.031])
            mp = micro_propagate(s, p, data, targets)
            Tg_inv, Ta_inv = _inverses(p)
            n = len(targets)
            out = [np.empty((n, 3)), np.empty((n, 3, 3)), np.empty((n, 3)), np.empty((n, 3)),
                   np.empty((n, 3))]
            _kernels.micro_kernel(s.t_WB, s.R_WB.matrix().copy(), s.v_WB, s.epoch, data.t,
                                  data.grid, data.gyro,
                                  data.accel, p.b_g, p.b_a, p.T_s, Tg_inv, Ta_inv, GRAVITY,
                                  targets, *out)
            for i, t in enumerate(targets):
                ref = integrate(s, p, data, t, jacobian=False)
                np.testing.assert_allclose(mp.p[i], ref.state.t_WB, atol=1e-12)
                np.testing.assert_allclose(mp.R[i], ref.state.R_WB.matrix(), atol=1e-12)
                np.testing.assert_allclose(mp.v[i], ref.state.v_WB, atol=1e-12)
                np.testing.assert_allclose(mp.p_rate[i], ref.p_rate, atol=1e-10)
                np.testing.assert_allclose(mp.theta_rate[i], ref.theta_rate, atol=1e-10)
                np.testing.assert_allclose(out[0][i], mp.p[i], atol=1e-12)
                np.testing.assert_allclose(out[1][i], mp.R[i], atol=1e-12)
                np.testing.assert_allclose(out[3][i], mp.p_rate[i], atol=1e-10)
                np.testing.assert_allclose(out[4][i], mp.theta_rate[i], atol=1e-10)


def test_end_rates_are_time_derivatives(rng):
    data = random_motion(rng, 50)
    p = random_params(rng)
    s = random_state(rng, data.t[10])
    t = data.t[25] + 0.0033
    h = 1e-6
    a = integrate(s, p, data, t + h, jacobian=False).state
    b = integrate(s, p, data, t - h, jacobian=False).state
    res = integrate(s, p, data, t, jacobian=False)
    np.testing.assert_allclose((a.t_WB - b.t_WB) / (2 * h), res.p_rate, rtol=1e-6, atol=1e-8)
    dth = a.R_WB.boxminus(b.R_WB) / (2 * h)
    np.testing.assert_allclose(dth, res.theta_rate, rtol=1e-6, atol=1e-7)


# --------------------------------------------------------------------------
# synthesis against the analytic trajectory

def test_noise_free_propagation_tracks_ground_truth():
    traj = Trajectory(TrajectorySpec("wave", duration=5.0))
    data = synthesize_imu(traj, ImuParams(), None, seed=0)
    s0 = traj.sample(0.5)
    s = NavState(s0.p[0], so3_exp(np.zeros(3)).from_matrix(s0.R[0]), s0.v[0], 0.5)
    out = integrate(s, ImuParams(), data, 1.5, jacobian=False).state
    s1 = traj.sample(1.5)
    assert np.linalg.norm(out.t_WB - s1.p[0]) < 2e-3
    assert np.linalg.norm(out.v_WB - s1.v[0]) < 5e-3


@given(st.floats(0.01, 0.4))
def test_propagation_horizon_property(dt):
    rng = np.random.default_rng(3)
    data = random_motion(rng, 60)
    s = random_state(rng, data.t[0])
    res = integrate(s, ImuParams(), data, data.t[0] + dt)
    np.testing.assert_allclose(res.Phi[0:3, 6:9], dt * np.eye(3), atol=1e-12)
