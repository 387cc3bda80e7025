"""Compiled inner loops of the MPC solver.

Everything here works on plain float64 arrays so numba can compile it. The
public, documented surface lives in ``mpc.py``; these functions are not
meant to be called directly.

The optimizer is a control-limited iLQR (Gauss-Newton DDP with a projected
Newton box-QP per knot) over the single-shooting Euler rollout. To handle the
control-rate penalty the DDP state is augmented with the previous control:
``z_k = [x_k, u_{k-1}]`` (17 entries).
"""
import numpy as np
from numba import njit

NX = 13
NU = 4
NZ = NX + NU


@njit(cache=True, nogil=True)
def dynamics(x, u, m, g, J, Jinv, alloc):
    dx = np.empty(NX)
    fr = u[0] + u[1] + u[2] + u[3]
    tau = alloc[1:, :] @ u
    q0, qx, qy, qz = x[6], x[7], x[8], x[9]
    wx, wy, wz = x[10], x[11], x[12]
    dx[0] = x[3]
    dx[1] = x[4]
    dx[2] = x[5]
    dx[3] = fr / m * 2.0 * (qx * qz + q0 * qy)
    dx[4] = fr / m * 2.0 * (qy * qz - q0 * qx)
    dx[5] = fr / m * (q0 * q0 - qx * qx - qy * qy + qz * qz) - g
    dx[6] = 0.5 * (-wx * qx - wy * qy - wz * qz)
    dx[7] = 0.5 * (wx * q0 + wz * qy - wy * qz)
    dx[8] = 0.5 * (wy * q0 - wz * qx + wx * qz)
    dx[9] = 0.5 * (wz * q0 + wy * qx - wx * qy)
    w = x[10:13]
    Jw = J @ w
    gyro = np.empty(3)
    gyro[0] = w[1] * Jw[2] - w[2] * Jw[1]
    gyro[1] = w[2] * Jw[0] - w[0] * Jw[2]
    gyro[2] = w[0] * Jw[1] - w[1] * Jw[0]
    dx[10:13] = Jinv @ (tau - gyro)
    return dx


@njit(cache=True, nogil=True)
def step(x, u, dt, m, g, J, Jinv, alloc):
    xn = x + dt * dynamics(x, u, m, g, J, Jinv, alloc)
    nq = np.sqrt(xn[6] ** 2 + xn[7] ** 2 + xn[8] ** 2 + xn[9] ** 2)
    xn[6:10] /= nq
    return xn


@njit(cache=True, nogil=True)
def _skew(a):
    S = np.zeros((3, 3))
    S[0, 1] = -a[2]
    S[0, 2] = a[1]
    S[1, 0] = a[2]
    S[1, 2] = -a[0]
    S[2, 0] = -a[1]
    S[2, 1] = a[0]
    return S


@njit(cache=True, nogil=True)
def step_jacobians(x, u, dt, m, g, J, Jinv, alloc):
    """Next state and exact Jacobians of the renormalized Euler step."""
    fr = u[0] + u[1] + u[2] + u[3]
    q0, qx, qy, qz = x[6], x[7], x[8], x[9]
    wx, wy, wz = x[10], x[11], x[12]

    Fx = np.zeros((NX, NX))
    Fu = np.zeros((NX, NU))
    for i in range(3):
        Fx[i, 3 + i] = 1.0
    c = fr / m
    # d(body_z)/dq
    Fx[3, 6] = 2 * c * qy
    Fx[3, 7] = 2 * c * qz
    Fx[3, 8] = 2 * c * q0
    Fx[3, 9] = 2 * c * qx
    Fx[4, 6] = -2 * c * qx
    Fx[4, 7] = -2 * c * q0
    Fx[4, 8] = 2 * c * qz
    Fx[4, 9] = 2 * c * qy
    Fx[5, 6] = 2 * c * q0
    Fx[5, 7] = -2 * c * qx
    Fx[5, 8] = -2 * c * qy
    Fx[5, 9] = 2 * c * qz
    bz0 = 2.0 * (qx * qz + q0 * qy)
    bz1 = 2.0 * (qy * qz - q0 * qx)
    bz2 = q0 * q0 - qx * qx - qy * qy + qz * qz
    for j in range(NU):
        Fu[3, j] = bz0 / m
        Fu[4, j] = bz1 / m
        Fu[5, j] = bz2 / m
    # quaternion kinematics, 0.5 * Omega(w) q
    Om = np.array(
        [
            [0.0, -wx, -wy, -wz],
            [wx, 0.0, wz, -wy],
            [wy, -wz, 0.0, wx],
            [wz, wy, -wx, 0.0],
        ]
    )
    Fx[6:10, 6:10] = 0.5 * Om
    Xi = np.array([[-qx, -qy, -qz], [q0, -qz, qy], [qz, q0, -qx], [-qy, qx, q0]])
    Fx[6:10, 10:13] = 0.5 * Xi
    # rigid-body rate dynamics
    w = x[10:13].copy()
    Jw = J @ w
    Fx[10:13, 10:13] = -Jinv @ (_skew(w) @ J - _skew(Jw))
    Fu[10:13, :] = Jinv @ alloc[1:, :]

    xt = x + dt * dynamics(x, u, m, g, J, Jinv, alloc)
    nq = np.sqrt(xt[6] ** 2 + xt[7] ** 2 + xt[8] ** 2 + xt[9] ** 2)
    xn = xt.copy()
    xn[6:10] = xt[6:10] / nq

    A = np.eye(NX) + dt * Fx
    B = dt * Fu
    # chain through q -> q / |q|
    qh = xn[6:10].copy()
    P = (np.eye(4) - np.outer(qh, qh)) / nq
    A[6:10, :] = P @ A[6:10, :]
    B[6:10, :] = P @ B[6:10, :]
    return xn, A, B


@njit(cache=True, nogil=True)
def _state_error(x, xT):
    """``S x - xT`` with S flipping the quaternion to q0 >= 0, and the sign used."""
    e = x - xT
    s = 1.0
    if x[6] < 0.0:
        s = -1.0
        for i in range(6, 10):
            e[i] = -x[i] - xT[i]
    return e, s


@njit(cache=True, nogil=True)
def stage_cost(x, u, up, w_tra, terminal, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra):
    e, _ = _state_error(x, xT)
    cost = e @ (Qx @ e)
    if terminal:
        return cost
    du = u - uref
    cost += du @ (Qu @ du)
    dd = u - up
    cost += dd @ (Qdu @ dd)
    if w_tra > 0.0:
        d = np.empty(4)
        d[0:3] = x[0:3] - p_tra
        cq = x[6] * q_tra[0] + x[7] * q_tra[1] + x[8] * q_tra[2] + x[9] * q_tra[3]
        d[3] = 4.0 * (1.0 - cq * cq)
        cost += w_tra * (d @ (Qmax @ d))
    return cost


@njit(cache=True, nogil=True)
def stage_derivatives(x, u, up, w_tra, terminal, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra):
    """Gradient and Gauss-Newton Hessian of the stage cost in ``(z, u)``."""
    lz = np.zeros(NZ)
    lzz = np.zeros((NZ, NZ))
    lu = np.zeros(NU)
    luu = np.zeros((NU, NU))
    luz = np.zeros((NU, NZ))

    e, s = _state_error(x, xT)
    S = np.ones(NX)
    if s < 0.0:
        S[6:10] = -1.0
    Qe = Qx @ e
    for i in range(NX):
        lz[i] = 2.0 * S[i] * Qe[i]
        for j in range(NX):
            lzz[i, j] = 2.0 * S[i] * Qx[i, j] * S[j]
    if terminal:
        return lz, lzz, lu, luu, luz

    if w_tra > 0.0:
        d = np.empty(4)
        d[0:3] = x[0:3] - p_tra
        cq = x[6] * q_tra[0] + x[7] * q_tra[1] + x[8] * q_tra[2] + x[9] * q_tra[3]
        d[3] = 4.0 * (1.0 - cq * cq)
        Jd = np.zeros((4, NX))
        for i in range(3):
            Jd[i, i] = 1.0
        for i in range(4):
            Jd[3, 6 + i] = -8.0 * cq * q_tra[i]
        g = 2.0 * w_tra * (Jd.T @ (Qmax @ d))
        H = 2.0 * w_tra * (Jd.T @ (Qmax @ Jd))
        lz[0:NX] += g
        lzz[0:NX, 0:NX] += H

    lu[:] = 2.0 * (Qu @ (u - uref)) + 2.0 * (Qdu @ (u - up))
    lz[NX:] = -2.0 * (Qdu @ (u - up))
    luu[:, :] = 2.0 * (Qu + Qdu)
    lzz[NX:, NX:] = 2.0 * Qdu
    luz[:, NX:] = -2.0 * Qdu
    return lz, lzz, lu, luu, luz


@njit(cache=True, nogil=True)
def rollout(x0, u_init, U, dt, m, g, J, Jinv, alloc, wts, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra):
    N = U.shape[0]
    X = np.empty((N + 1, NX))
    X[0] = x0
    cost = 0.0
    up = u_init
    for k in range(N):
        cost += stage_cost(X[k], U[k], up, wts[k], False, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra)
        X[k + 1] = step(X[k], U[k], dt, m, g, J, Jinv, alloc)
        up = U[k]
    cost += stage_cost(X[N], U[N - 1], up, 0.0, True, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra)
    return X, cost


@njit(cache=True, nogil=True)
def _cholesky(A):
    n = A.shape[0]
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return L, False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return L, True


@njit(cache=True, nogil=True)
def _chol_solve(L, b):
    n = L.shape[0]
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


@njit(cache=True, nogil=True)
def _submatrix(H, idx):
    n = idx.shape[0]
    S = np.empty((n, n))
    for a in range(n):
        for b in range(n):
            S[a, b] = H[idx[a], idx[b]]
    return S


@njit(cache=True, nogil=True)
def box_qp(H, g, lower, upper, x0):
    """Projected-Newton solution of ``min 0.5 x'Hx + g'x, lower <= x <= upper``.

    Returns ``(x, free_mask, ok)``; ``ok`` is False when the free block of H is not PD.
    """
    n = g.shape[0]
    free = np.ones(n, dtype=np.bool_)
    # fast path: unconstrained minimizer already feasible
    L, ok = _cholesky(H)
    if not ok:
        return x0, free, False
    xu = -_chol_solve(L, g)
    inside = True
    for i in range(n):
        if xu[i] < lower[i] or xu[i] > upper[i]:
            inside = False
    if inside:
        return xu, free, True
    x = np.minimum(np.maximum(x0, lower), upper)
    old_clamped = np.zeros(n, dtype=np.bool_)
    L = np.zeros((0, 0))
    old_value = 0.0
    for it in range(100):
        value = x @ g + 0.5 * (x @ (H @ x))
        if it > 0 and (old_value - value) < 1e-8 * abs(old_value):
            break
        old_value = value
        grad = g + H @ x
        clamped = np.zeros(n, dtype=np.bool_)
        for i in range(n):
            if (x[i] <= lower[i] and grad[i] > 0.0) or (x[i] >= upper[i] and grad[i] < 0.0):
                clamped[i] = True
            free[i] = not clamped[i]
        if np.all(clamped):
            break
        idx = np.nonzero(free)[0]
        changed = it == 0
        for i in range(n):
            if clamped[i] != old_clamped[i]:
                changed = True
        if changed:
            L, ok = _cholesky(_submatrix(H, idx))
            if not ok:
                return x, free, False
        old_clamped[:] = clamped
        gf = np.empty(idx.shape[0])
        for a in range(idx.shape[0]):
            gf[a] = grad[idx[a]]
        if np.sqrt(gf @ gf) < 1e-10:
            break
        xc = x.copy()
        for i in range(n):
            if free[i]:
                xc[i] = 0.0
        grad_clamped = g + H @ xc
        rhs = np.empty(idx.shape[0])
        for a in range(idx.shape[0]):
            rhs[a] = grad_clamped[idx[a]]
        sol = _chol_solve(L, rhs)
        search = np.zeros(n)
        for a in range(idx.shape[0]):
            search[idx[a]] = -sol[a] - x[idx[a]]
        sdotg = search @ grad
        if sdotg >= 0.0:
            break
        stp = 1.0
        while True:
            xn = np.minimum(np.maximum(x + stp * search, lower), upper)
            vn = xn @ g + 0.5 * (xn @ (H @ xn))
            if (vn - value) / (stp * sdotg) >= 0.1:
                break
            stp *= 0.6
            if stp < 1e-20:
                break
        x = xn
    # final free set for the feedback gains
    grad = g + H @ x
    for i in range(n):
        free[i] = not ((x[i] <= lower[i] and grad[i] > 0.0) or (x[i] >= upper[i] and grad[i] < 0.0))
    idx = np.nonzero(free)[0]
    if idx.shape[0] > 0:
        L, ok = _cholesky(_submatrix(H, idx))
        if not ok:
            return x, free, False
    return x, free, True


@njit(cache=True, nogil=True)
def _linearize(X, U, u_init, dt, m, g, J, Jinv, alloc, wts, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra):
    N = U.shape[0]
    As = np.empty((N, NX, NX))
    Bs = np.empty((N, NX, NU))
    lzs = np.empty((N + 1, NZ))
    lzzs = np.empty((N + 1, NZ, NZ))
    lus = np.empty((N, NU))
    luus = np.empty((N, NU, NU))
    luzs = np.empty((N, NU, NZ))
    up = u_init
    for k in range(N):
        _, A, B = step_jacobians(X[k], U[k], dt, m, g, J, Jinv, alloc)
        As[k] = A
        Bs[k] = B
        lz, lzz, lu, luu, luz = stage_derivatives(
            X[k], U[k], up, wts[k], False, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra
        )
        lzs[k] = lz
        lzzs[k] = lzz
        lus[k] = lu
        luus[k] = luu
        luzs[k] = luz
        up = U[k]
    lz, lzz, _, _, _ = stage_derivatives(X[N], U[N - 1], up, 0.0, True, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra)
    lzs[N] = lz
    lzzs[N] = lzz
    return As, Bs, lzs, lzzs, lus, luus, luzs


@njit(cache=True, nogil=True)
def _aug(A, B):
    Az = np.zeros((NZ, NZ))
    Az[:NX, :NX] = A
    Bz = np.zeros((NZ, NU))
    Bz[:NX, :] = B
    for i in range(NU):
        Bz[NX + i, i] = 1.0
    return Az, Bz


@njit(cache=True, nogil=True)
def control_gradient(U, As, Bs, lzs, lus):
    """Exact gradient of the total cost w.r.t. the controls by adjoint recursion."""
    N = U.shape[0]
    G = np.empty((N, NU))
    lam = lzs[N].copy()
    for k in range(N - 1, -1, -1):
        Az, Bz = _aug(As[k], Bs[k])
        G[k] = lus[k] + Bz.T @ lam
        lam = lzs[k] + Az.T @ lam
    return G


@njit(cache=True, nogil=True)
def projected_gradient_norm(U, G, lo, hi):
    s = 0.0
    for k in range(U.shape[0]):
        for i in range(NU):
            v = min(max(U[k, i] - G[k, i], lo[i]), hi[i]) - U[k, i]
            s += v * v
    return np.sqrt(s)


@njit(cache=True, nogil=True)
def _backward(U, As, Bs, lzs, lzzs, lus, luus, luzs, lo, hi, mu, kff_prev):
    N = U.shape[0]
    kff = np.zeros((N, NU))
    Kfb = np.zeros((N, NU, NZ))
    Vz = lzs[N].copy()
    Vzz = lzzs[N].copy()
    dV1 = 0.0
    dV2 = 0.0
    for k in range(N - 1, -1, -1):
        Az, Bz = _aug(As[k], Bs[k])
        Qz = lzs[k] + Az.T @ Vz
        Qu = lus[k] + Bz.T @ Vz
        VB = Vzz @ Bz
        Qzz = lzzs[k] + Az.T @ Vzz @ Az
        Quu = luus[k] + Bz.T @ VB
        Quz = luzs[k] + VB.T @ Az
        Quu_reg = Quu + mu * np.eye(NU)
        k_k, free, ok = box_qp(Quu_reg, Qu, lo - U[k], hi - U[k], kff_prev[k])
        if not ok:
            return kff, Kfb, dV1, dV2, False
        idx = np.nonzero(free)[0]
        K = np.zeros((NU, NZ))
        if idx.shape[0] > 0:
            L, _ = _cholesky(_submatrix(Quu_reg, idx))
            for col in range(NZ):
                rhs = np.empty(idx.shape[0])
                for a in range(idx.shape[0]):
                    rhs[a] = Quz[idx[a], col]
                sol = _chol_solve(L, rhs)
                for a in range(idx.shape[0]):
                    K[idx[a], col] = -sol[a]
        kff[k] = k_k
        Kfb[k] = K
        dV1 += k_k @ Qu
        dV2 += 0.5 * (k_k @ (Quu @ k_k))
        Vz = Qz + K.T @ (Quu @ k_k) + K.T @ Qu + Quz.T @ k_k
        Vzz = Qzz + K.T @ Quu @ K + K.T @ Quz + Quz.T @ K
        Vzz = 0.5 * (Vzz + Vzz.T)
    return kff, Kfb, dV1, dV2, True


@njit(cache=True, nogil=True)
def _forward(X, U, kff, Kfb, alpha, u_init, lo, hi, dt, m, g, J, Jinv, alloc, wts, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra):
    N = U.shape[0]
    Xn = np.empty_like(X)
    Un = np.empty_like(U)
    Xn[0] = X[0]
    cost = 0.0
    up_new = u_init
    up_old = u_init
    dz = np.empty(NZ)
    for k in range(N):
        dz[:NX] = Xn[k] - X[k]
        dz[NX:] = up_new - up_old
        u = U[k] + alpha * kff[k] + Kfb[k] @ dz
        Un[k] = np.minimum(np.maximum(u, lo), hi)
        cost += stage_cost(Xn[k], Un[k], up_new, wts[k], False, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra)
        Xn[k + 1] = step(Xn[k], Un[k], dt, m, g, J, Jinv, alloc)
        up_new = Un[k]
        up_old = U[k]
    cost += stage_cost(Xn[N], Un[N - 1], up_new, 0.0, True, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra)
    return Xn, Un, cost


@njit(cache=True, nogil=True)
def _all_finite(X):
    for v in X.ravel():
        if not np.isfinite(v):
            return False
    return True


@njit(cache=True, nogil=True)
def ilqr(x0, u_init, U0, lo, hi, dt, m, g, J, Jinv, alloc, wts, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra,
         max_iter, tol_grad, tol_rel, mu0=1.0):
    """Returns ``(X, U, cost, iterations, status, stationarity, trace, n_trace, mu)``.

    status: 0 converged, 1 iteration limit / stalled, 2 non-finite rollout.
    ``mu0`` is the initial damping; ``mu`` the final one (for warm restarts).
    """
    N = U0.shape[0]
    U = np.empty_like(U0)
    for k in range(N):
        U[k] = np.minimum(np.maximum(U0[k], lo), hi)
    trace = np.empty(max_iter + 1)
    X, cost = rollout(x0, u_init, U, dt, m, g, J, Jinv, alloc, wts, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra)
    trace[0] = cost
    n_trace = 1
    if not (_all_finite(X) and np.isfinite(cost)):
        return X, U, cost, 0, 2, np.inf, trace, n_trace, mu0

    # Levenberg-Marquardt damping on Quu, adapted to the accepted step length
    mu_min = 1e-6
    mu = max(mu0, mu_min)
    mu_max = 1e10
    alphas = 0.5 ** np.arange(12)
    kff = np.zeros((N, NU))
    status = 1
    iters = 0
    stat = np.inf
    need_lin = True
    As, Bs, lzs, lzzs, lus, luus, luzs = _linearize(X, U, u_init, dt, m, g, J, Jinv, alloc, wts, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra)
    while True:
        if need_lin:
            As, Bs, lzs, lzzs, lus, luus, luzs = _linearize(
                X, U, u_init, dt, m, g, J, Jinv, alloc, wts, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra
            )
            G = control_gradient(U, As, Bs, lzs, lus)
            stat = projected_gradient_norm(U, G, lo, hi)
            need_lin = False
            if stat < tol_grad:
                status = 0
                break
        if iters >= max_iter:
            break
        iters += 1

        ok = False
        while not ok:
            kff, Kfb, dV1, dV2, ok = _backward(U, As, Bs, lzs, lzzs, lus, luus, luzs, lo, hi, mu, kff)
            if not ok:
                mu = max(mu * 10.0, 1e-6)
                if mu > mu_max:
                    break
        if not ok:
            break

        accepted = False
        for a in range(alphas.shape[0]):
            alpha = alphas[a]
            Xn, Un, cn = _forward(X, U, kff, Kfb, alpha, u_init, lo, hi, dt, m, g, J, Jinv, alloc, wts, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra)
            if not (np.isfinite(cn) and _all_finite(Xn)):
                continue
            expected = -(alpha * dV1 + alpha * alpha * dV2)
            if cn < cost and (expected <= 0.0 or (cost - cn) >= 1e-4 * expected):
                accepted = True
                break
        if accepted:
            rel = (cost - cn) / max(abs(cost), 1e-300)
            X = Xn
            U = Un
            cost = cn
            trace[n_trace] = cost
            n_trace += 1
            need_lin = True
            if alpha >= 0.5:
                mu = max(mu / 10.0, mu_min)
            elif alpha < 0.25:
                mu = mu * 10.0
            if rel < tol_rel:
                As, Bs, lzs, lzzs, lus, luus, luzs = _linearize(
                    X, U, u_init, dt, m, g, J, Jinv, alloc, wts, xT, uref, Qx, Qu, Qdu, Qmax, p_tra, q_tra
                )
                G = control_gradient(U, As, Bs, lzs, lus)
                stat = projected_gradient_norm(U, G, lo, hi)
                status = 0
                break
        else:
            mu = max(mu * 10.0, 1e-6)
            if mu > mu_max:
                break
    return X, U, cost, iters, status, stat, trace, n_trace, mu
