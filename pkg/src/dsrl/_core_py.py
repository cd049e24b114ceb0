"""Pure-Python (numpy) implementation of the hot numerical kernels.

Mirrors the compiled ``_core`` extension function for function; selected by
``dsrl._backend`` when the extension is unavailable or disabled.
"""

from __future__ import annotations

import numpy as np

from .errors import SingularSystemError

PIVOT_TOL = 1e-12
STATUS_OPTIMAL = 0
STATUS_INFEASIBLE = 1
STATUS_MAX_ITER = 2

_DEP_TOL = 1e-12
_REL_DEP_TOL = 1e-10
_FEAS_TOL = 1e-8


def lu_solve(A, B):
    """Solve ``A X = B`` by LU with partial pivoting.

    ``B`` may be a vector or a matrix of right-hand sides.
    """
    a = np.array(A, dtype=np.float64, copy=True)
    x = np.array(B, dtype=np.float64, copy=True)
    n = a.shape[0]
    vec = x.ndim == 1
    if vec:
        x = x[:, None]
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) < PIVOT_TOL:
            raise SingularSystemError(f"pivot {abs(a[p, k]):.3e} below {PIVOT_TOL:g} at column {k}")
        if p != k:
            a[[k, p]] = a[[p, k]]
            x[[k, p]] = x[[p, k]]
        if k + 1 < n:
            f = a[k + 1 :, k] / a[k, k]
            a[k + 1 :, k:] -= np.outer(f, a[k, k:])
            x[k + 1 :] -= np.outer(f, x[k])
    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - a[k, k + 1 :] @ x[k + 1 :]) / a[k, k]
    return x[:, 0] if vec else x


def _dependent(Qinv, npv, z_dir, na, m):
    # n_p lies in the span of the active normals (relative to its own Q^-1 norm)
    if z_dir is None or na >= m:
        return True
    return float(z_dir @ npv) <= _REL_DEP_TOL * float(npv @ Qinv @ npv)


def _directions(Qinv, N, npv):
    # Primal step H n_p and dual step N* n_p for the active normals N (m x a).
    if N.shape[1] == 0:
        return Qinv @ npv, np.zeros(0)
    QN = Qinv @ N
    M = N.T @ QN
    try:
        r = lu_solve(M, QN.T @ npv)
    except SingularSystemError:
        return None, None
    z_dir = Qinv @ npv - QN @ r
    return z_dir, r


def solve_qp_dense(Q, q, G, h, A, b, max_iter=200):
    """Goldfarb-Idnani dual active-set method for a strictly convex QP.

    minimize 1/2 z'Qz + q'z  subject to  G z <= h,  A z = b.

    Returns ``(z, lam, nu, active, status, iterations)`` where ``active`` is
    a boolean mask over the rows of ``G``.
    """
    Q = np.asarray(Q, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64).reshape(-1, q.shape[0])
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    A = np.asarray(A, dtype=np.float64).reshape(-1, q.shape[0])
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    m, k, p = q.shape[0], G.shape[0], A.shape[0]

    Qinv = lu_solve(Q, np.eye(m))
    Qinv = 0.5 * (Qinv + Qinv.T)
    z = -Qinv @ q
    # constraints in n'z >= c form: equalities first, then inequalities
    normals = np.vstack([-A, -G]) if p + k else np.zeros((0, m))
    rhs = np.concatenate([-b, -h])
    act: list[int] = []
    u: list[float] = []
    iters = 0

    def slack(i):
        return float(normals[i] @ z - rhs[i])

    # equality constraints: always full steps, multipliers unrestricted in sign
    for j in range(p):
        N = normals[act].T if act else np.zeros((m, 0))
        z_dir, r = _directions(Qinv, N, normals[j])
        iters += 1
        s = slack(j)
        if _dependent(Qinv, normals[j], z_dir, len(act), m):
            if abs(s) > 1e-9 * (1.0 + abs(rhs[j])):
                return _pack(z, act, u, m, k, p, STATUS_INFEASIBLE, iters)
            continue
        t = -s / float(z_dir @ normals[j])
        z = z + t * z_dir
        u = [ui - t * ri for ui, ri in zip(u, r)]
        act.append(j)
        u.append(t)

    while True:
        cand = [i for i in range(p, p + k) if i not in act]
        if not cand:
            break
        svals = np.array([slack(i) for i in cand])
        tols = 1e-11 * (1.0 + np.abs(rhs[cand]) + np.abs(normals[cand]).sum(axis=1) * np.abs(z).max(initial=0.0))
        viol = svals + tols
        j = int(np.argmin(svals))
        if viol[j] >= 0.0:
            break
        ip = cand[j]
        up = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                return _pack(z, act, u, m, k, p, STATUS_MAX_ITER, iters)
            N = normals[act].T if act else np.zeros((m, 0))
            z_dir, r = _directions(Qinv, N, normals[ip])
            if z_dir is None:
                return _pack(z, act, u, m, k, p, STATUS_INFEASIBLE, iters)
            t1, drop = np.inf, -1
            for pos, idx in enumerate(act):
                if idx >= p and r[pos] > _DEP_TOL:
                    ratio = u[pos] / r[pos]
                    if ratio < t1:
                        t1, drop = ratio, pos
            t2 = np.inf
            if not _dependent(Qinv, normals[ip], z_dir, len(act), m):
                t2 = -slack(ip) / float(z_dir @ normals[ip])
            if not np.isfinite(t1) and not np.isfinite(t2):
                return _pack(z, act, u, m, k, p, STATUS_INFEASIBLE, iters)
            if not np.isfinite(t2):
                u = [ui - t1 * ri for ui, ri in zip(u, r)]
                up += t1
                del act[drop], u[drop]
                continue
            t = min(t1, t2)
            z = z + t * z_dir
            u = [ui - t * ri for ui, ri in zip(u, r)]
            up += t
            if t2 <= t1:
                act.append(ip)
                u.append(up)
                break
            del act[drop], u[drop]

    z, u = _polish(Q, q, normals, rhs, act, z, u)
    status = STATUS_OPTIMAL if _feasible(normals, rhs, z, p) else STATUS_INFEASIBLE
    return _pack(z, act, u, m, k, p, status, iters)


def _feasible(normals, rhs, z, p):
    if normals.shape[0] == 0:
        return True
    s = normals @ z - rhs
    tol = _FEAS_TOL * (1.0 + np.abs(rhs) + np.abs(normals).sum(axis=1) * np.abs(z).max(initial=0.0))
    return bool(np.all(s[p:] >= -tol[p:]) and np.all(np.abs(s[:p]) <= tol[:p]))


def _polish(Q, q, normals, rhs, act, z, u):
    # One exact solve of the equality-constrained KKT system on the final active set.
    if not act:
        return z, u
    m = Q.shape[0]
    N = normals[act]
    na = len(act)
    K = np.zeros((m + na, m + na))
    K[:m, :m] = Q
    K[:m, m:] = -N.T
    K[m:, :m] = N
    try:
        sol = lu_solve(K, np.concatenate([-q, rhs[act]]))
    except SingularSystemError:
        return z, u
    return sol[:m], list(sol[m:])


def _pack(z, act, u, m, k, p, status, iters):
    lam = np.zeros(k)
    nu = np.zeros(p)
    active = np.zeros(k, dtype=bool)
    for idx, ui in zip(act, u):
        if idx < p:
            nu[idx] = ui
        else:
            lam[idx - p] = max(ui, 0.0)
            active[idx - p] = True
    return np.asarray(z, dtype=np.float64), lam, nu, active, status, iters
