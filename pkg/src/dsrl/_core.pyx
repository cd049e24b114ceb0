# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: dense LU solve and the dual active-set QP solver.

Same API and algorithm as ``dsrl._core_py``. Problem sizes are tiny (a few
variables, about ten rows), so plain loops over small scratch buffers beat
any BLAS call overhead.
"""

import numpy as np

from libc.math cimport fabs

from .errors import SingularSystemError

PIVOT_TOL = 1e-12
STATUS_OPTIMAL = 0
STATUS_INFEASIBLE = 1
STATUS_MAX_ITER = 2

cdef double _PIVOT_TOL = 1e-12
cdef double _DEP_TOL = 1e-12
cdef double _REL_DEP_TOL = 1e-10
_FEAS_TOL = 1e-8
cdef double _INF = float("inf")
cdef int _OPT = 0
cdef int _INFEAS = 1
cdef int _MAXIT = 2


cdef Py_ssize_t _lu_factor(double[:, ::1] a, Py_ssize_t n, Py_ssize_t[::1] piv, double* bad) noexcept nogil:
    # In-place LU with partial pivoting on a[:n, :n]; -1 on success, else the failing column.
    cdef Py_ssize_t i, j, k, p
    cdef double best, v, f
    for k in range(n):
        p = k
        best = fabs(a[k, k])
        for i in range(k + 1, n):
            v = fabs(a[i, k])
            if v > best:
                best = v
                p = i
        piv[k] = p
        if best < _PIVOT_TOL:
            bad[0] = best
            return k
        if p != k:
            for j in range(n):
                v = a[k, j]
                a[k, j] = a[p, j]
                a[p, j] = v
        for i in range(k + 1, n):
            f = a[i, k] / a[k, k]
            a[i, k] = f
            for j in range(k + 1, n):
                a[i, j] -= f * a[k, j]
    return -1


cdef void _lu_apply(double[:, ::1] a, Py_ssize_t n, Py_ssize_t[::1] piv, double[:, ::1] x, Py_ssize_t nrhs) noexcept nogil:
    cdef Py_ssize_t i, j, c, p
    cdef double v, s
    for c in range(nrhs):
        for i in range(n):
            p = piv[i]
            if p != i:
                v = x[i, c]
                x[i, c] = x[p, c]
                x[p, c] = v
        for i in range(1, n):
            s = x[i, c]
            for j in range(i):
                s -= a[i, j] * x[j, c]
            x[i, c] = s
        for i in range(n - 1, -1, -1):
            s = x[i, c]
            for j in range(i + 1, n):
                s -= a[i, j] * x[j, c]
            x[i, c] = s / a[i, i]


def lu_solve(A, B):
    """Solve ``A X = B`` by LU with partial pivoting."""
    cdef double[:, ::1] a = np.array(A, dtype=np.float64, order="C", copy=True)
    xb = np.array(B, dtype=np.float64, copy=True)
    vec = xb.ndim == 1
    if vec:
        xb = xb[:, None]
    xb = np.ascontiguousarray(xb)
    cdef double[:, ::1] x = xb
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t[::1] piv = np.zeros(max(n, 1), dtype=np.intp)
    cdef double bad = 0.0
    cdef Py_ssize_t col = _lu_factor(a, n, piv, &bad)
    if col >= 0:
        raise SingularSystemError(f"pivot {bad:.3e} below {PIVOT_TOL:g} at column {col}")
    _lu_apply(a, n, piv, x, x.shape[1])
    return xb[:, 0] if vec else xb


cdef double _slack(double[:, ::1] normals, double[::1] rhs, double[::1] z, Py_ssize_t i, Py_ssize_t m) noexcept nogil:
    cdef double s = -rhs[i]
    cdef Py_ssize_t j
    for j in range(m):
        s += normals[i, j] * z[j]
    return s


cdef int _directions(double[:, ::1] Qinv, double[:, ::1] normals, Py_ssize_t[::1] act, Py_ssize_t na,
                     Py_ssize_t ip, Py_ssize_t m, double[::1] zdir, double[::1] r,
                     double[:, ::1] QN, double[:, ::1] M, double[:, ::1] rr, Py_ssize_t[::1] piv) noexcept nogil:
    # zdir = H n_p and r = N* n_p for the current active normals; 1 if they are dependent.
    cdef Py_ssize_t i, j, l
    cdef double s, bad = 0.0
    for i in range(m):
        s = 0.0
        for j in range(m):
            s += Qinv[i, j] * normals[ip, j]
        zdir[i] = s
    if na == 0:
        return 0
    for l in range(na):
        for i in range(m):
            s = 0.0
            for j in range(m):
                s += Qinv[i, j] * normals[act[l], j]
            QN[i, l] = s
    for i in range(na):
        for l in range(na):
            s = 0.0
            for j in range(m):
                s += normals[act[i], j] * QN[j, l]
            M[i, l] = s
        s = 0.0
        for j in range(m):
            s += QN[j, i] * normals[ip, j]
        rr[i, 0] = s
    if _lu_factor(M, na, piv, &bad) >= 0:
        return 1
    _lu_apply(M, na, piv, rr, 1)
    for i in range(na):
        r[i] = rr[i, 0]
    for i in range(m):
        s = zdir[i]
        for l in range(na):
            s -= QN[i, l] * r[l]
        zdir[i] = s
    return 0


cdef double _dot(double[::1] a, double[:, ::1] B, Py_ssize_t row, Py_ssize_t m) noexcept nogil:
    cdef double s = 0.0
    cdef Py_ssize_t j
    for j in range(m):
        s += a[j] * B[row, j]
    return s


cdef double _qnorm(double[:, ::1] Qinv, double[:, ::1] normals, Py_ssize_t ip, Py_ssize_t m) noexcept nogil:
    # n_p' Q^-1 n_p
    cdef double s = 0.0
    cdef Py_ssize_t i, j
    for i in range(m):
        for j in range(m):
            s += normals[ip, i] * Qinv[i, j] * normals[ip, j]
    return s


def solve_qp_dense(Q, q, G, h, A, b, int max_iter=200):
    """Goldfarb-Idnani dual active-set method for a strictly convex QP.

    minimize 1/2 z'Qz + q'z  subject to  G z <= h,  A z = b.

    Returns ``(z, lam, nu, active, status, iterations)``.
    """
    qa = np.ascontiguousarray(q, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t m = qa.shape[0]
    Ga = np.ascontiguousarray(G, dtype=np.float64).reshape(-1, m)
    ha = np.ascontiguousarray(h, dtype=np.float64).reshape(-1)
    Aa = np.ascontiguousarray(A, dtype=np.float64).reshape(-1, m)
    ba = np.ascontiguousarray(b, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t k = Ga.shape[0], p = Aa.shape[0], nc = k + p

    Qinv_np = lu_solve(Q, np.eye(m))
    Qinv_np = np.ascontiguousarray(0.5 * (Qinv_np + Qinv_np.T))
    normals_np = np.ascontiguousarray(np.vstack([-Aa, -Ga])) if nc else np.zeros((1, m))
    rhs_np = np.ascontiguousarray(np.concatenate([-ba, -ha])) if nc else np.zeros(1)

    cdef double[:, ::1] Qinv = Qinv_np
    cdef double[:, ::1] normals = normals_np
    cdef double[::1] rhs = rhs_np
    cdef double[::1] qv = qa
    z_np = np.zeros(m)
    cdef double[::1] z = z_np
    cdef double[::1] zdir = np.zeros(m)
    cdef double[::1] r = np.zeros(m + 1)
    u_np = np.zeros(m + 1)
    cdef double[::1] u = u_np
    act_np = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] act = act_np
    cdef double[:, ::1] QN = np.zeros((m, m + 1))
    cdef double[:, ::1] M = np.zeros((m + 1, m + 1))
    cdef double[:, ::1] rr = np.zeros((m + 1, 1))
    cdef Py_ssize_t[::1] piv = np.zeros(m + 1, dtype=np.intp)
    cdef unsigned char[::1] in_act = np.zeros(max(nc, 1), dtype=np.uint8)

    cdef Py_ssize_t i, j, l, ip, drop, na = 0, iters = 0, best_i
    cdef double s, t, t1, t2, denom, up, best_s, tol, zmax, nsum, ratio
    cdef int status = _OPT, dep

    for i in range(m):
        s = 0.0
        for j in range(m):
            s -= Qinv[i, j] * qv[j]
        z[i] = s

    with nogil:
        # equality constraints: full steps, multipliers free in sign
        for ip in range(p):
            dep = _directions(Qinv, normals, act, na, ip, m, zdir, r, QN, M, rr, piv)
            iters += 1
            s = _slack(normals, rhs, z, ip, m)
            denom = _dot(zdir, normals, ip, m)
            if dep or na >= m or denom <= _REL_DEP_TOL * _qnorm(Qinv, normals, ip, m):
                if fabs(s) > 1e-9 * (1.0 + fabs(rhs[ip])):
                    status = _INFEAS
                    break
                continue
            t = -s / denom
            for i in range(m):
                z[i] += t * zdir[i]
            for l in range(na):
                u[l] -= t * r[l]
            act[na] = ip
            u[na] = t
            in_act[ip] = 1
            na += 1

        while status == _OPT:
            zmax = 0.0
            for j in range(m):
                if fabs(z[j]) > zmax:
                    zmax = fabs(z[j])
            best_i = -1
            best_s = 0.0
            tol = 0.0
            for i in range(p, nc):
                if in_act[i]:
                    continue
                s = _slack(normals, rhs, z, i, m)
                if best_i < 0 or s < best_s:
                    nsum = 0.0
                    for j in range(m):
                        nsum += fabs(normals[i, j])
                    best_i = i
                    best_s = s
                    tol = 1e-11 * (1.0 + fabs(rhs[i]) + nsum * zmax)
            if best_i < 0 or best_s + tol >= 0.0:
                break
            ip = best_i
            up = 0.0
            while True:
                iters += 1
                if iters > max_iter:
                    status = _MAXIT
                    break
                dep = _directions(Qinv, normals, act, na, ip, m, zdir, r, QN, M, rr, piv)
                if dep:
                    status = _INFEAS
                    break
                t1 = _INF
                drop = -1
                for l in range(na):
                    if act[l] >= p and r[l] > _DEP_TOL:
                        ratio = u[l] / r[l]
                        if ratio < t1:
                            t1 = ratio
                            drop = l
                denom = _dot(zdir, normals, ip, m)
                t2 = _INF
                if na < m and denom > _REL_DEP_TOL * _qnorm(Qinv, normals, ip, m):
                    t2 = -_slack(normals, rhs, z, ip, m) / denom
                if drop < 0 and t2 == _INF:
                    status = _INFEAS
                    break
                if t2 == _INF:
                    for l in range(na):
                        u[l] -= t1 * r[l]
                    up += t1
                else:
                    t = t1 if t1 < t2 else t2
                    for i in range(m):
                        z[i] += t * zdir[i]
                    for l in range(na):
                        u[l] -= t * r[l]
                    up += t
                    if t2 <= t1:
                        act[na] = ip
                        u[na] = up
                        in_act[ip] = 1
                        na += 1
                        break
                in_act[act[drop]] = 0
                for l in range(drop, na - 1):
                    act[l] = act[l + 1]
                    u[l] = u[l + 1]
                na -= 1

    act_list = [int(act_np[l]) for l in range(na)]
    u_list = [float(u_np[l]) for l in range(na)]
    if status == _OPT and na:
        z_np, u_list = _polish(Q, qa, normals_np, rhs_np, act_list, z_np, u_list)
    if status == _OPT and nc and not _feasible(normals_np, rhs_np, z_np, p):
        status = _INFEAS
    return _pack(z_np, act_list, u_list, k, p, status, iters)


def _feasible(normals, rhs, z, p):
    s = normals @ z - rhs
    tol = _FEAS_TOL * (1.0 + np.abs(rhs) + np.abs(normals).sum(axis=1) * np.abs(z).max(initial=0.0))
    return bool(np.all(s[p:] >= -tol[p:]) and np.all(np.abs(s[:p]) <= tol[:p]))


def _polish(Q, q, normals, rhs, act, z, u):
    cdef Py_ssize_t m = q.shape[0], na = len(act)
    N = normals[act]
    K = np.zeros((m + na, m + na))
    K[:m, :m] = Q
    K[:m, m:] = -N.T
    K[m:, :m] = N
    try:
        sol = lu_solve(K, np.concatenate([-q, rhs[act]]))
    except SingularSystemError:
        return z, u
    return sol[:m], list(sol[m:])


def _pack(z, act, u, k, p, status, iters):
    lam = np.zeros(k)
    nu = np.zeros(p)
    active = np.zeros(k, dtype=bool)
    for idx, ui in zip(act, u):
        if idx < p:
            nu[idx] = ui
        else:
            lam[idx - p] = max(ui, 0.0)
            active[idx - p] = True
    return np.asarray(z, dtype=np.float64), lam, nu, active, int(status), int(iters)
