"""Compiled inner loops for per-landmark work.

These mirror the vectorized numpy routines in :mod:`ksf.camera` and
:mod:`ksf.imu`; the tests check both routes against each other.
"""
from __future__ import annotations

import numpy as np
from numba import njit

MIN_DEPTH = 1e-8


@njit(cache=True)
def _skew(v):
    S = np.zeros((3, 3))
    S[0, 1], S[0, 2] = -v[2], v[1]
    S[1, 0], S[1, 2] = v[2], -v[0]
    S[2, 0], S[2, 1] = -v[1], v[0]
    return S


@njit(cache=True)
def _exp(phi):
    th = np.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2)
    K = _skew(phi)
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    return np.eye(3) + np.sin(th) / th * K + (1.0 - np.cos(th)) / (th * th) * (K @ K)


@njit(cache=True)
def _jr(phi):
    th = np.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2)
    K = _skew(phi)
    if th < 1e-8:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    return (np.eye(3) - (1.0 - np.cos(th)) / (th * th) * K
            + (th - np.sin(th)) / (th ** 3) * (K @ K))


# --------------------------------------------------------------------------
# projection

@njit(cache=True)
def project_point(iv, c, Jc, Ji):
    """Pixel of camera-frame point ``c``; fills ``Jc`` (2x3) and ``Ji`` (2x8).

    Returns ``(u, v, front)``.
    """
    fx, fy, cx, cy, k1, k2, p1, p2 = iv[0], iv[1], iv[2], iv[3], iv[4], iv[5], iv[6], iv[7]
    front = c[2] > MIN_DEPTH * max(1.0, abs(c[0]), abs(c[1]))
    z = c[2] if front else 1.0
    iz = 1.0 / z
    x, y = c[0] * iz, c[1] * iz
    r2 = x * x + y * y
    rad = 1.0 + k1 * r2 + k2 * r2 * r2
    drad = k1 + 2.0 * k2 * r2
    xd = x * rad + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * rad + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    d00 = rad + 2 * x * x * drad + 2 * p1 * y + 6 * p2 * x
    d01 = 2 * x * y * drad + 2 * p1 * x + 2 * p2 * y
    d11 = rad + 2 * y * y * drad + 6 * p1 * y + 2 * p2 * x
    # Jc = diag(f) * Jd * Jn with Jn = [[iz, 0, -x iz], [0, iz, -y iz]]
    Jc[0, 0] = fx * d00 * iz
    Jc[0, 1] = fx * d01 * iz
    Jc[0, 2] = -fx * (d00 * x + d01 * y) * iz
    Jc[1, 0] = fy * d01 * iz
    Jc[1, 1] = fy * d11 * iz
    Jc[1, 2] = -fy * (d01 * x + d11 * y) * iz
    Ji[:, :] = 0.0
    Ji[0, 0], Ji[1, 1] = xd, yd
    Ji[0, 2], Ji[1, 3] = 1.0, 1.0
    Ji[0, 4], Ji[1, 4] = fx * x * r2, fy * y * r2
    Ji[0, 5], Ji[1, 5] = fx * x * r2 * r2, fy * y * r2 * r2
    Ji[0, 6], Ji[1, 6] = fx * 2 * x * y, fy * (r2 + 2 * y * y)
    Ji[0, 7], Ji[1, 7] = fx * (r2 + 2 * x * x), fy * 2 * x * y
    return fx * xd + cx, fy * yd + cy, front


@njit(cache=True)
def undistort_points(intr, uv, iterations=20):
    """Normalized coordinates of pixels ``uv`` (n, 2) for per-row intrinsics (n, 8)."""
    n = uv.shape[0]
    out = np.empty((n, 2))
    for i in range(n):
        fx, fy, cx, cy, k1, k2, p1, p2 = (intr[i, 0], intr[i, 1], intr[i, 2], intr[i, 3],
                                          intr[i, 4], intr[i, 5], intr[i, 6], intr[i, 7])
        tx, ty = (uv[i, 0] - cx) / fx, (uv[i, 1] - cy) / fy
        x, y = tx, ty
        for _ in range(iterations):
            r2 = x * x + y * y
            rad = 1.0 + k1 * r2 + k2 * r2 * r2
            drad = k1 + 2.0 * k2 * r2
            rx = x * rad + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x) - tx
            ry = y * rad + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y - ty
            if max(abs(rx), abs(ry)) < 1e-15:
                break
            a = rad + 2 * x * x * drad + 2 * p1 * y + 6 * p2 * x
            b = 2 * x * y * drad + 2 * p1 * x + 2 * p2 * y
            d = rad + 2 * y * y * drad + 6 * p1 * y + 2 * p2 * x
            det = a * d - b * b
            x -= (d * rx - b * ry) / det
            y -= (a * ry - b * rx) / det
        out[i, 0], out[i, 1] = x, y
    return out


# --------------------------------------------------------------------------
# anchored inverse-depth measurement model

@njit(cache=True)
def aid_eval(lm, p_obs, R_obs, p_rate, theta_rate, p_clone, v_clone, tau, R_BC, t_BC,
             row_coeff, intr, p_a, R_a, R_BCa, t_BCa, gravity, mode, uv, front,
             J_lm, J_clone, J_anchor, J_TBC, J_TBCa, J_intr, J_td, J_tr):
    """Predict pixels and, depending on ``mode``, fill Jacobian blocks.

    ``mode`` 0: pixels only, 1: plus landmark block, 2: every block.  Output
    arrays carry a leading observation axis and are written in place.
    """
    n = p_obs.shape[0]
    alpha, beta, rho = lm[0], lm[1], lm[2]
    f = np.array([alpha, beta, 1.0])
    Rbf = R_BCa @ f
    q = R_a @ (Rbf + rho * t_BCa) + rho * p_a
    base = R_a @ t_BCa + p_a
    g = np.array([0.0, 0.0, -gravity])
    Jc = np.empty((2, 3))
    Ji = np.empty((2, 8))
    for i in range(n):
        Ro = R_obs[i]
        Rb = R_BC[i]
        A = Rb.T @ Ro.T
        qo = q - rho * p_obs[i]
        d = Ro.T @ qo
        dd = d - rho * t_BC[i]
        c = Rb.T @ dd
        u, v, fr = project_point(intr[i], c, Jc, Ji)
        uv[i, 0], uv[i, 1] = u, v
        front[i] = fr
        if mode == 0:
            continue
        AR = A @ R_a
        L = AR @ R_BCa
        L[:, 2] = A @ base - A @ p_obs[i] - Rb.T @ t_BC[i]
        J_lm[i] = Jc @ L
        if mode == 1:
            continue
        ti = tau[i]
        s = p_obs[i] - p_clone[i] - v_clone[i] * ti - 0.5 * g * ti * ti
        dth = A @ _skew(qo)
        C = np.empty((3, 9))
        C[:, 0:3] = -rho * A
        C[:, 3:6] = rho * (A @ _skew(s)) + dth
        C[:, 6:9] = -rho * ti * A
        J_clone[i] = Jc @ C
        An = np.empty((3, 9))
        An[:, 0:3] = rho * A
        An[:, 3:6] = -A @ _skew(q - rho * p_a)
        An[:, 6:9] = 0.0
        J_anchor[i] = Jc @ An
        T = np.empty((3, 6))
        T[:, 0:3] = -rho * Rb.T
        T[:, 3:6] = Rb.T @ _skew(dd)
        J_TBC[i] = Jc @ T
        Ta = np.empty((3, 6))
        Ta[:, 0:3] = rho * AR
        Ta[:, 3:6] = -AR @ _skew(Rbf)
        J_TBCa[i] = Jc @ Ta
        J_intr[i] = Ji
        dtau = Jc @ (-rho * (A @ p_rate[i]) + dth @ theta_rate[i])
        J_td[i] = dtau
        J_tr[i] = dtau * row_coeff[i]


@njit(cache=True)
def _cost(lm, p_obs, R_obs, R_BC, t_BC, intr, p_a, R_a, R_BCa, t_BCa, z, uv, front, ws):
    zeros3, zeros1, J_lm, J9a, J9b, J6a, J6b, J8, J2a, J2b = ws
    aid_eval(lm, p_obs, R_obs, zeros3, zeros3, zeros3, zeros3, zeros1, R_BC, t_BC, zeros1, intr,
             p_a, R_a, R_BCa, t_BCa, 0.0, 0, uv, front, J_lm, J9a, J9b, J6a, J6b, J8, J2a, J2b)
    c = 0.0
    for i in range(uv.shape[0]):
        if not front[i]:
            return np.inf
        c += (z[i, 0] - uv[i, 0]) ** 2 + (z[i, 1] - uv[i, 1]) ** 2
    return c


@njit(cache=True)
def _workspace(n):
    return (np.zeros((n, 3)), np.zeros(n), np.empty((n, 2, 3)), np.empty((n, 2, 9)),
            np.empty((n, 2, 9)), np.empty((n, 2, 6)), np.empty((n, 2, 6)), np.empty((n, 2, 8)),
            np.empty((n, 2)), np.empty((n, 2)))


@njit(cache=True)
def refine_landmark(x0, free, p_obs, R_obs, R_BC, t_BC, intr, p_a, R_a, R_BCa, t_BCa, z, iters):
    """Levenberg-Marquardt on the first ``free`` AID parameters.

    Returns ``(params, ok)``; ``ok`` is false when a point falls behind a
    camera at the start or the normal equations are singular.
    """
    n = z.shape[0]
    x = x0.copy()
    uv = np.empty((n, 2))
    front = np.empty(n, dtype=np.bool_)
    ws = _workspace(n)
    zeros3, zeros1, J_lm, J9a, J9b, J6a, J6b, J8, J2a, J2b = ws
    cost = _cost(x, p_obs, R_obs, R_BC, t_BC, intr, p_a, R_a, R_BCa, t_BCa, z, uv, front, ws)
    if not np.isfinite(cost):
        return x, False
    lam = 1e-3
    for _ in range(iters):
        aid_eval(x, p_obs, R_obs, zeros3, zeros3, zeros3, zeros3, zeros1, R_BC, t_BC, zeros1, intr,
                 p_a, R_a, R_BCa, t_BCa, 0.0, 1, uv, front, J_lm, J9a, J9b, J6a, J6b, J8, J2a, J2b)
        H = np.zeros((free, free))
        gvec = np.zeros(free)
        for i in range(n):
            for r in range(2):
                res = z[i, r] - uv[i, r]
                for a in range(free):
                    gvec[a] += J_lm[i, r, a] * res
                    for b in range(free):
                        H[a, b] += J_lm[i, r, a] * J_lm[i, r, b]
        improved = False
        step = 0.0
        for _ in range(6):
            M = H.copy()
            for a in range(free):
                M[a, a] += lam * (H[a, a] + 1e-10)
            if abs(np.linalg.det(M)) < 1e-300:
                return x, False
            dx = np.linalg.solve(M, gvec)
            xn = x.copy()
            for a in range(free):
                xn[a] += dx[a]
            cn = _cost(xn, p_obs, R_obs, R_BC, t_BC, intr, p_a, R_a, R_BCa, t_BCa, z, uv, front, ws)
            if cn <= cost:
                x, cost = xn, cn
                lam = max(lam * 0.1, 1e-9)
                improved = True
                step = np.abs(dx).max()
                break
            lam *= 10.0
        if not improved or step < 1e-9:
            break
    return x, True


@njit(cache=True)
def dlt_point(centers, R_WC, bearings, degenerate_ratio):
    """World point from normalized bearings; ``(point, ok)``."""
    n = centers.shape[0]
    shift = np.zeros(3)
    for i in range(n):
        shift += centers[i]
    shift /= n
    A = np.empty((2 * n, 4))
    for i in range(n):
        Rt = R_WC[i].T
        t = -Rt @ (centers[i] - shift)
        for r in range(2):
            b = bearings[i, r]
            for k in range(3):
                A[2 * i + r, k] = b * Rt[2, k] - Rt[r, k]
            A[2 * i + r, 3] = b * t[2] - t[r]
            nrm = np.sqrt(np.sum(A[2 * i + r] ** 2))
            A[2 * i + r] /= nrm
    _, s, Vt = np.linalg.svd(A)
    X = Vt[3]
    out = np.zeros(3)
    if s[2] < degenerate_ratio * s[0]:
        return out, False
    if abs(X[3]) < 1e-12 * np.sqrt(X[0] ** 2 + X[1] ** 2 + X[2] ** 2):
        return out, False
    out = X[:3] / X[3] + shift
    return out, True


# --------------------------------------------------------------------------
# IMU micro-propagation

@njit(cache=True)
def _interp(ts, gyro, accel, t):
    n = ts.shape[0]
    i = np.searchsorted(ts, t, side="right") - 1
    if i < 0:
        i = 0
    if i > n - 2:
        i = n - 2
    w = (t - ts[i]) / (ts[i + 1] - ts[i])
    return (1.0 - w) * gyro[i] + w * gyro[i + 1], (1.0 - w) * accel[i] + w * accel[i + 1]


@njit(cache=True)
def _corrected(ts, gyro, accel, t, b_g, b_a, T_s, Tg_inv, Ta_inv):
    gy, ac = _interp(ts, gyro, accel, t)
    a = Ta_inv @ (ac - b_a)
    w = Tg_inv @ (gy - b_g - T_s @ a)
    return w, a


@njit(cache=True)
def micro_kernel(p0, R0, v0, t0, ts, grid, gyro, accel, b_g, b_a, T_s, Tg_inv, Ta_inv, gravity,
                 targets, out_p, out_R, out_v, out_pr, out_tr):
    """Trapezoidal mean propagation over ``grid`` nodes to each target, with end-time derivatives."""
    g = np.array([0.0, 0.0, -gravity])
    for j in range(targets.shape[0]):
        te = targets[j]
        p, v, R = p0.copy(), v0.copy(), R0.copy()
        w_prev, a_prev = _corrected(ts, gyro, accel, t0, b_g, b_a, T_s, Tg_inv, Ta_inv)
        pr = v.copy()
        tr = R @ w_prev
        fwd = te >= t0
        lo, hi = min(t0, te), max(t0, te)
        i0 = np.searchsorted(grid, lo, side="right")
        i1 = np.searchsorted(grid, hi, side="left")
        m = i1 - i0
        t_prev = t0
        for k in range(m + 1):
            if k < m:
                t_next = grid[i0 + k] if fwd else grid[i1 - 1 - k]
            else:
                t_next = te
            dt = t_next - t_prev
            if dt == 0.0:
                continue
            w_next, a_next = _corrected(ts, gyro, accel, t_next, b_g, b_a, T_s, Tg_inv, Ta_inv)
            phi = 0.5 * (w_prev + w_next) * dt
            Rn = R @ _exp(phi)
            fa = R @ a_prev
            fb = Rn @ a_next
            aw = 0.5 * (fa + fb) + g
            if k == m:
                tr = Rn @ (_jr(phi) @ w_next)
                a_dot = 0.5 * (np.cross(tr, fb) + Rn @ ((a_next - a_prev) / dt))
                pr = v + aw * dt + 0.5 * dt * dt * a_dot
            p = p + v * dt + 0.5 * aw * dt * dt
            v = v + aw * dt
            R = Rn
            w_prev, a_prev = w_next, a_next
            t_prev = t_next
        out_p[j], out_R[j], out_v[j], out_pr[j], out_tr[j] = p, R, v, pr, tr


# --------------------------------------------------------------------------
# covariance propagation

@njit(cache=True)
def _signal_jac(generic, Tg_inv, Ta_inv, TgTs, w, a, Dw, Da):
    Dw[:, :] = 0.0
    Da[:, :] = 0.0
    if not generic:
        for i in range(3):
            Dw[i, i] = -1.0
            Da[i, 3 + i] = -1.0
        return
    for i in range(3):
        for r in range(3):
            Da[r, 3 + i] = -Ta_inv[r, i]
            Dw[r, i] = -Tg_inv[r, i]
            for j in range(3):
                Da[r, 24 + 3 * i + j] = -Ta_inv[r, i] * a[j]
                Dw[r, 6 + 3 * i + j] = -Tg_inv[r, i] * w[j]
                Dw[r, 15 + 3 * i + j] = -Tg_inv[r, i] * a[j]
    Dw[:, 3:6] = -TgTs @ np.ascontiguousarray(Da[:, 3:6])
    Dw[:, 24:33] = -TgTs @ np.ascontiguousarray(Da[:, 24:33])


@njit(cache=True)
def integrate_kernel(p0, R0, v0, nodes, w_hat, a_hat, generic, Tg_inv, Ta_inv, T_s,
                     qg, qa, qbg, qba, with_noise, gravity, Phi, Q, out):
    """Trapezoidal mean, transition and noise propagation over ``nodes``.

    ``Phi`` and ``Q`` are ``(n, n)`` and overwritten; ``out`` receives
    ``p, v, p_rate, theta_rate`` as rows and ``R`` follows in rows 4..6.
    """
    n = Phi.shape[0]
    m = n - 9
    g = np.array([0.0, 0.0, -gravity])
    Phi[:, :] = 0.0
    Q[:, :] = 0.0
    for i in range(n):
        Phi[i, i] = 1.0
    TgTs = Tg_inv @ T_s
    Dw_a = np.zeros((3, m))
    Da_a = np.zeros((3, m))
    Dw_b = np.zeros((3, m))
    Da_b = np.zeros((3, m))
    _signal_jac(generic, Tg_inv, Ta_inv, TgTs, w_hat[0], a_hat[0], Dw_a, Da_a)
    p = p0.copy()
    v = v0.copy()
    R = R0.copy()
    p_rate = v0.copy()
    theta_rate = R0 @ w_hat[0]
    F9 = np.zeros((9, n))
    A = np.zeros((9, n))
    last = len(nodes) - 2
    for k in range(len(nodes) - 1):
        dt = nodes[k + 1] - nodes[k]
        if dt == 0.0:
            continue
        w_mid = 0.5 * (w_hat[k] + w_hat[k + 1])
        phi = w_mid * dt
        R_next = R @ _exp(phi)
        fa = R @ a_hat[k]
        fb = R_next @ a_hat[k + 1]
        a_w = 0.5 * (fa + fb) + g
        _signal_jac(generic, Tg_inv, Ta_inv, TgTs, w_hat[k + 1], a_hat[k + 1], Dw_b, Da_b)
        Th_x = (R_next @ _jr(phi)) @ (0.5 * dt * (Dw_a + Dw_b))
        Sb = _skew(fb)
        V_th = -0.5 * dt * (_skew(fa) + Sb)
        V_x = 0.5 * dt * (R @ Da_a + R_next @ Da_b) - 0.5 * dt * (Sb @ Th_x)
        F9[:, :] = 0.0
        for i in range(9):
            F9[i, i] = 1.0
        for i in range(3):
            F9[i, 6 + i] = dt
        F9[0:3, 3:6] = 0.5 * dt * V_th
        F9[0:3, 9:] = 0.5 * dt * V_x
        F9[3:6, 9:] = Th_x
        F9[6:9, 3:6] = V_th
        F9[6:9, 9:] = V_x
        # F = [F9; 0 I], so only the first nine rows of F @ X change
        A[:, :] = F9 @ Phi
        Phi[0:9, :] = A
        if with_noise:
            A[:, :] = F9 @ Q
            Q[0:9, :] = A
            B = Q @ F9.T
            Q[:, 0:9] = B
            adt = abs(dt)
            Q[3:6, 3:6] += (R_next @ qg @ R_next.T) * adt
            Q[6:9, 6:9] += (R_next @ qa @ R_next.T) * adt
            for i in range(3):
                Q[9 + i, 9 + i] += qbg * adt
                Q[12 + i, 12 + i] += qba * adt
        Dw_a[:, :] = Dw_b
        Da_a[:, :] = Da_b
        if k == last:
            w_end = w_hat[k + 1]
            theta_rate = R_next @ (_jr(phi) @ w_end)
            a_dot = 0.5 * (np.cross(theta_rate, fb) + R_next @ ((a_hat[k + 1] - a_hat[k]) / dt))
            p_rate = v + a_w * dt + 0.5 * dt * dt * a_dot
        p = p + v * dt + 0.5 * a_w * dt * dt
        v = v + a_w * dt
        R = R_next
    out[0] = p
    out[1] = v
    out[2] = p_rate
    out[3] = theta_rate
    out[4:7] = R
