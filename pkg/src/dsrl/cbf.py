"""Control barrier function rows and the min-norm safety QP.

A barrier ``h`` (safe when h >= 0) becomes one inequality that is affine in
the control and in the disturbance::

    a_u . u + b0 + db . w >= 0

Relative degree 1 uses ``grad h . (f + g u + E w) + k1 h``. Relative degree 2
builds psi1 = grad h . f + k1 h from the nominal drift and constrains
psi2 = d/dt psi1 + k2 psi1 along the disturbed dynamics. Both constructions
can also return the derivatives of (a_u, b0, db) w.r.t. the state, which the
adversary needs to differentiate the filter along a rollout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog

from .diffqp import QPInstance, QPSolution, qp_differential, solve_and_jacobian, solve_qp
from .envs import EnvModel
from .errors import DegeneracyError, NumericError

log = logging.getLogger(__name__)


@dataclass
class BarrierSpec:
    name: str
    h: Callable[[np.ndarray], float]
    grad_h: Callable[[np.ndarray], np.ndarray]
    hess_h: Callable[[np.ndarray], np.ndarray]
    relative_degree: int = 1
    kappa1: float = 1.0
    kappa2: float = 1.0

    def __post_init__(self) -> None:
        if self.relative_degree not in (1, 2):
            raise ValueError("relative_degree must be 1 or 2")
        if self.kappa1 <= 0 or (self.relative_degree == 2 and self.kappa2 <= 0):
            raise ValueError("class-K gains must be positive")


def quadratic_barrier(
    name: str,
    n: int,
    index: Sequence[int],
    M,
    center=None,
    linear=None,
    offset: float = 0.0,
    relative_degree: int = 1,
    kappa1: float = 1.0,
    kappa2: float = 1.0,
) -> BarrierSpec:
    """h(x) = (p - c)' M (p - c) + l' (p - c) + offset with p = x[index]."""
    idx = np.asarray(index, dtype=int)
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    c = np.zeros(len(idx)) if center is None else np.asarray(center, dtype=np.float64)
    lin = np.zeros(len(idx)) if linear is None else np.asarray(linear, dtype=np.float64)
    Ms = M + M.T
    H = np.zeros((n, n))
    H[np.ix_(idx, idx)] = Ms

    def h(x):
        d = x[idx] - c
        return float(d @ M @ d + lin @ d + offset)

    def grad_h(x):
        out = np.zeros(n)
        out[idx] = Ms @ (x[idx] - c) + lin
        return out

    def hess_h(x):
        return H

    return BarrierSpec(name, h, grad_h, hess_h, relative_degree, kappa1, kappa2)


def make_barriers(
    model: EnvModel,
    *,
    obstacle_center=(3.0, 3.0),
    obstacle_radius: float = 1.0,
    glide_slope_deg: float = 45.0,
    kappa1: float = 1.0,
    kappa2: float = 1.0,
) -> list[BarrierSpec]:
    """Default barrier set for each environment."""
    if model.name in ("dubins1", "dubins2"):
        deg = 1 if model.name == "dubins1" else 2
        return [
            quadratic_barrier(
                "obstacle", model.n, [0, 1], np.eye(2), obstacle_center,
                offset=-float(obstacle_radius) ** 2, relative_degree=deg, kappa1=kappa1, kappa2=kappa2,
            )
        ]
    if model.name == "quad":
        cot2 = 1.0 / math.tan(math.radians(glide_slope_deg)) ** 2
        return [
            quadratic_barrier("glide_slope", 3, [0, 1, 2], np.diag([-cot2, -cot2, 1.0]), kappa1=kappa1),
            quadratic_barrier("floor", 3, [0, 1, 2], np.zeros((3, 3)), linear=[0.0, 0.0, 1.0], kappa1=kappa1),
        ]
    raise ValueError(f"no barriers defined for {model.name!r}")


@dataclass
class SafetyRow:
    """a_u . u + b0 + db_domega . w >= 0, optionally with state derivatives."""

    a_u: np.ndarray
    b0: float
    db_domega: np.ndarray
    da_dx: np.ndarray | None = None
    db0_dx: np.ndarray | None = None
    ddb_dx: np.ndarray | None = None

    def value(self, u, omega) -> float:
        return float(self.a_u @ u + self.b0 + self.db_domega @ omega)

    def state_grad(self, u, omega) -> np.ndarray:
        """d(value)/dx at fixed u and w."""
        return self.da_dx.T @ u + self.db0_dx + self.ddb_dx.T @ omega


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite value while building a CBF row")


def cbf_row_deg1(spec: BarrierSpec, model: EnvModel, x, with_state_grads: bool = False) -> SafetyRow:
    if spec.relative_degree != 1:
        raise ValueError(f"barrier {spec.name!r} has relative degree {spec.relative_degree}")
    x = np.asarray(x, dtype=np.float64)
    f, g, E = model.f(x), model.g(x), model.noise_matrix
    gh = spec.grad_h(x)
    a_u = g.T @ gh
    b0 = float(gh @ f + spec.kappa1 * spec.h(x))
    db = E.T @ gh
    _check_finite(f, g, a_u, b0)
    row = SafetyRow(a_u, b0, db)
    if with_state_grads:
        H = spec.hess_h(x)
        Df = model.Df(x)
        row.da_dx = np.array([H @ g[:, j] + model.Dgu(x, _unit(model.m, j)).T @ gh for j in range(model.m)])
        row.db0_dx = H @ f + Df.T @ gh + spec.kappa1 * gh
        row.ddb_dx = E.T @ H
    return row


def cbf_row_deg2(spec: BarrierSpec, model: EnvModel, x, with_state_grads: bool = False) -> SafetyRow:
    """Second-order chain; requires grad h . g = 0 (control enters two levels down).

    The state derivatives assume an affine drift f, which holds for every
    model shipped here.
    """
    if spec.relative_degree != 2:
        raise ValueError(f"barrier {spec.name!r} has relative degree {spec.relative_degree}")
    x = np.asarray(x, dtype=np.float64)
    f, g, E = model.f(x), model.g(x), model.noise_matrix
    gh = spec.grad_h(x)
    if np.max(np.abs(gh @ g)) > 1e-9 * (1.0 + np.max(np.abs(gh))):
        raise ValueError(f"barrier {spec.name!r} has relative degree 1 on {model.name}")
    H = spec.hess_h(x)
    Df = model.Df(x)
    psi1 = float(gh @ f + spec.kappa1 * spec.h(x))
    phi = H @ f + Df.T @ gh + spec.kappa1 * gh  # d psi1 / dx
    a_u = g.T @ phi
    b0 = float(phi @ f + spec.kappa2 * psi1)
    db = E.T @ phi
    _check_finite(f, g, a_u, b0)
    row = SafetyRow(a_u, b0, db)
    if with_state_grads:
        Phi = H @ Df + Df.T @ H + spec.kappa1 * H
        row.da_dx = np.array([Phi @ g[:, j] + model.Dgu(x, _unit(model.m, j)).T @ phi for j in range(model.m)])
        row.db0_dx = Phi @ f + Df.T @ phi + spec.kappa2 * phi
        row.ddb_dx = E.T @ Phi
    return row


def cbf_row(spec: BarrierSpec, model: EnvModel, x, with_state_grads: bool = False) -> SafetyRow:
    build = cbf_row_deg1 if spec.relative_degree == 1 else cbf_row_deg2
    return build(spec, model, x, with_state_grads)


def psi_values(spec: BarrierSpec, model: EnvModel, x, omega=None) -> tuple[float, ...]:
    """(psi0, psi1) for degree 2, (psi0,) for degree 1, at the nominal drift."""
    x = np.asarray(x, dtype=np.float64)
    h = spec.h(x)
    if spec.relative_degree == 1:
        return (h,)
    return (h, float(spec.grad_h(x) @ model.f(x) + spec.kappa1 * h))


def _unit(m: int, j: int) -> np.ndarray:
    e = np.zeros(m)
    e[j] = 1.0
    return e


def average_row(row: SafetyRow, samples) -> SafetyRow:
    """Expectation of an affine row over disturbance samples (rows of ``samples``)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise ValueError("average_row needs at least one sample")
    mean = samples.mean(axis=0)
    return SafetyRow(row.a_u, row.b0 + float(row.db_domega @ mean), row.db_domega, row.da_dx, row.db0_dx, row.ddb_dx)


@dataclass
class SafetyQP(QPInstance):
    """QP instance that remembers how its h-vector depends on the disturbance."""

    dh_domega: np.ndarray | None = None
    n_rows: int = 0
    rows: list = field(default_factory=list)


def assemble_safety_qp(u_rl, bounds, rows: Sequence[SafetyRow], omega) -> SafetyQP:
    """min ||u - u_rl||^2 over the box, subject to every row at disturbance ``omega``.

    Row i becomes ``-a_u . u <= b0 + db . w``; the box follows as ``u <= hi``
    and ``-u <= -lo``.
    """
    u_rl = np.asarray(u_rl, dtype=np.float64)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    omega = np.asarray(omega, dtype=np.float64)
    m, nr = u_rl.shape[0], len(rows)
    nw = omega.shape[0]
    G = np.zeros((nr + 2 * m, m))
    h = np.zeros(nr + 2 * m)
    dh = np.zeros((nr + 2 * m, nw))
    for i, r in enumerate(rows):
        G[i] = -r.a_u
        h[i] = r.b0 + r.db_domega @ omega
        dh[i] = r.db_domega
    eye = np.eye(m)
    G[nr : nr + m] = eye
    h[nr : nr + m] = hi
    G[nr + m :] = -eye
    h[nr + m :] = -lo
    return SafetyQP(2.0 * eye, -2.0 * u_rl, G, h, dh_domega=dh, n_rows=nr, rows=list(rows))


def fallback_action(rows: Sequence[SafetyRow], bounds, x=None, omega=None, u_ref=None) -> np.ndarray:
    """Control in the box maximizing the smallest row margin.

    Ties are broken toward ``u_ref`` (box center by default). ``x`` is
    accepted for logging only.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    m = lo.shape[0]
    nw = rows[0].db_domega.shape[0] if rows else 0
    omega = np.zeros(nw) if omega is None else np.asarray(omega, dtype=np.float64)
    A = np.array([r.a_u for r in rows]).reshape(-1, m)
    b = np.array([r.b0 + r.db_domega @ omega for r in rows])
    # maximize t  s.t.  t - a_i u <= b_i
    res = linprog(
        c=np.concatenate([np.zeros(m), [-1.0]]),
        A_ub=np.hstack([-A, np.ones((len(rows), 1))]),
        b_ub=b,
        bounds=[(l, u) for l, u in zip(lo, hi)] + [(None, None)],
        method="highs",
    )
    if res.status != 0:
        raise NumericError(f"fallback LP failed: {res.message}")
    t_star = -res.fun
    ref = 0.5 * (lo + hi) if u_ref is None else np.clip(np.asarray(u_ref, dtype=np.float64), lo, hi)
    slack = 1e-9 * (1.0 + abs(t_star))
    qp = QPInstance(
        2.0 * np.eye(m), -2.0 * ref,
        np.vstack([-A, np.eye(m), -np.eye(m)]),
        np.concatenate([b - (t_star - slack), hi, -lo]),
    )
    sol = solve_qp(qp)
    u = sol.z_star if sol.optimal else res.x[:m]
    log.info("QP infeasible at x=%s; fallback action %s with margin %.3g", None if x is None else np.round(x, 4), u, t_star)
    return np.clip(u, lo, hi)


@dataclass
class FilterResult:
    u: np.ndarray
    fallback: bool
    qp: SafetyQP
    sol: QPSolution | None
    du_domega: np.ndarray | None = None
    du_dx: np.ndarray | None = None


class SafetyFilter:
    """Rows for every barrier at the current state, the QP, and its sensitivities."""

    def __init__(self, model: EnvModel, barriers: Sequence[BarrierSpec]) -> None:
        self.model = model
        self.barriers = list(barriers)
        self.bounds = (model.u_low, model.u_high)

    def rows(self, x, with_state_grads: bool = False) -> list[SafetyRow]:
        return [cbf_row(b, self.model, x, with_state_grads) for b in self.barriers]

    def h_value(self, x) -> float:
        return min(b.h(np.asarray(x, dtype=np.float64)) for b in self.barriers)

    def rectify(self, x, u_rl, omega_asm, *, grads: bool = False) -> FilterResult:
        """Rectified action for raw action ``u_rl`` with the QP built at ``omega_asm``.

        With ``grads`` the result also carries du/dw (m x nw) and, holding
        ``u_rl`` fixed, du/dx (m x n).
        """
        rows = self.rows(x, with_state_grads=grads)
        qp = assemble_safety_qp(u_rl, self.bounds, rows, omega_asm)
        if not grads:
            sol = solve_qp(qp)
            jac = None
        else:
            qp_used, sol, jac = solve_and_jacobian(qp)
            if sol.optimal and qp_used is not qp:
                qp = SafetyQP(qp_used.Q, qp_used.q, qp_used.G, qp_used.h, dh_domega=qp.dh_domega, n_rows=qp.n_rows, rows=rows)
        if not sol.optimal:
            u = fallback_action(rows, self.bounds, x, omega_asm, u_ref=u_rl)
            res = FilterResult(u, True, qp, sol)
            if grads:
                res.du_domega = np.zeros((self.model.m, qp.dh_domega.shape[1]))
                res.du_dx = np.zeros((self.model.m, self.model.n))
            return res
        res = FilterResult(sol.z_star.copy(), False, qp, sol)
        if grads:
            res.du_domega = jac @ qp.dh_domega
            res.du_dx = self._state_jacobian(qp, sol, rows, omega_asm)
        return res

    def _state_jacobian(self, qp: SafetyQP, sol: QPSolution, rows, omega) -> np.ndarray:
        n, m, k = self.model.n, self.model.m, qp.k
        dG = np.zeros((k, m, n))
        dh = np.zeros((k, n))
        for i, r in enumerate(rows):
            dG[i] = -r.da_dx
            dh[i] = r.db0_dx + r.ddb_dx.T @ omega
        try:
            return qp_differential(qp, sol, dG=dG, dh=dh)
        except DegeneracyError:
            return np.zeros((m, n))
