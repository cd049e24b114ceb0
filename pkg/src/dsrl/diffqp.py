"""Small dense convex QPs: solve, check KKT, and differentiate the solution.

The problem form is::

    minimize    1/2 z'Qz + q'z
    subject to  G z <= h,   A z = b

Differentiation works on the KKT system

    [ Q   G'D(lam)   A' ] [dz  ]   [ -dq - dG' lam ]
    [ G   D(Gz - h)  0  ] [dlam] = [  dh - dG z    ]
    [ A   0          0  ] [dnu ]   [  db - dA z    ]

where the middle block row is the differentiated complementarity condition
with the multiplier differential rescaled by D(lam).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import DegeneracyError, ShapeError, SingularSystemError
from .net import solve_linear

log = logging.getLogger(__name__)

MAX_ITER = 200
ACTIVE_TOL = 1e-8
DEGENERACY_PERTURBATION = 1e-9

_STATUS = {0: "optimal", 1: "infeasible", 2: "max_iter"}


@dataclass
class QPInstance:
    Q: np.ndarray
    q: np.ndarray
    G: np.ndarray
    h: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1)
        m = self.q.shape[0]
        self.G = np.asarray(self.G, dtype=np.float64).reshape(-1, m)
        self.h = np.asarray(self.h, dtype=np.float64).reshape(-1)
        if self.A is None:
            self.A = np.zeros((0, m))
            self.b = np.zeros(0)
        self.A = np.asarray(self.A, dtype=np.float64).reshape(-1, m)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.Q.shape != (m, m):
            raise ShapeError(f"Q is {self.Q.shape}, expected {(m, m)}")
        if self.h.shape[0] != self.G.shape[0] or self.b.shape[0] != self.A.shape[0]:
            raise ShapeError("constraint right-hand sides do not match their matrices")
        if np.max(np.abs(self.Q - self.Q.T), initial=0.0) > 1e-10:
            raise ValueError("Q must be symmetric")

    @property
    def m(self) -> int:
        return self.q.shape[0]

    @property
    def k(self) -> int:
        return self.G.shape[0]

    @property
    def p(self) -> int:
        return self.A.shape[0]

    def to_json(self) -> str:
        return json.dumps({name: getattr(self, name).tolist() for name in ("Q", "q", "G", "h", "A", "b")})

    @classmethod
    def from_json(cls, text: str) -> QPInstance:
        d = json.loads(text)
        m = len(d["q"])
        return cls(
            np.array(d["Q"]),
            np.array(d["q"]),
            np.array(d["G"]).reshape(-1, m),
            np.array(d["h"]),
            np.array(d["A"]).reshape(-1, m),
            np.array(d["b"]),
        )


@dataclass
class QPSolution:
    z_star: np.ndarray
    lambda_star: np.ndarray
    nu_star: np.ndarray
    active_set: tuple[int, ...]
    status: str
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def solve_qp(qp: QPInstance) -> QPSolution:
    """Solve a strictly convex QP with the dual active-set kernel."""
    try:
        z, lam, nu, active, status, iters = _backend.solve_qp_dense(qp.Q, qp.q, qp.G, qp.h, qp.A, qp.b, MAX_ITER)
    except SingularSystemError as exc:
        raise ValueError("solve_qp needs a positive definite Q") from exc
    return QPSolution(z, lam, nu, tuple(int(i) for i in np.flatnonzero(active)), _STATUS[status], iters)


def kkt_residuals(qp: QPInstance, sol: QPSolution) -> tuple[float, float, float]:
    """Infinity-norm residuals (stationarity, primal feasibility, complementary slackness)."""
    z, lam, nu = sol.z_star, sol.lambda_star, sol.nu_star
    stat = qp.Q @ z + qp.q + qp.G.T @ lam + qp.A.T @ nu
    g = qp.G @ z - qp.h
    primal = max(float(np.max(g, initial=0.0)), float(np.max(np.abs(qp.A @ z - qp.b), initial=0.0)), 0.0)
    slack = float(np.max(np.abs(lam * g), initial=0.0))
    return float(np.max(np.abs(stat), initial=0.0)), primal, slack


def kkt_matrix(qp: QPInstance, sol: QPSolution) -> np.ndarray:
    """The differentiated KKT matrix at an optimal solution."""
    if not sol.optimal:
        raise ValueError(f"cannot differentiate a QP solution with status {sol.status!r}")
    m, k, p = qp.m, qp.k, qp.p
    active = np.zeros(k, dtype=bool)
    active[list(sol.active_set)] = True
    weak = active & (sol.lambda_star <= ACTIVE_TOL)
    if np.any(weak):
        raise DegeneracyError(f"weakly active constraints {np.flatnonzero(weak).tolist()} (lambda <= {ACTIVE_TOL:g})")
    lam = np.where(active, sol.lambda_star, 0.0)
    s = np.where(active, 0.0, qp.G @ sol.z_star - qp.h)
    K = np.zeros((m + k + p, m + k + p))
    K[:m, :m] = qp.Q
    K[:m, m : m + k] = qp.G.T * lam
    K[:m, m + k :] = qp.A.T
    K[m : m + k, :m] = qp.G
    K[m : m + k, m : m + k] = np.diag(s)
    K[m + k :, :m] = qp.A
    return K


def qp_differential(qp: QPInstance, sol: QPSolution, *, dq=None, dG=None, dh=None) -> np.ndarray:
    """Forward-mode sensitivity of ``z*`` along parameter directions.

    Each direction argument carries a trailing axis of length ``d``: ``dq``
    is (m, d), ``dG`` is (k, m, d), ``dh`` is (k, d). Returns dz of shape (m, d).
    """
    m, k, p = qp.m, qp.k, qp.p
    d = next(x.shape[-1] for x in (dq, dG, dh) if x is not None)
    top = np.zeros((m, d))
    mid = np.zeros((k, d))
    if dq is not None:
        top -= dq
    if dG is not None:
        top -= np.einsum("kmd,k->md", dG, sol.lambda_star)
        mid -= np.einsum("kmd,m->kd", dG, sol.z_star)
    if dh is not None:
        mid += dh
    rhs = np.vstack([top, mid, np.zeros((p, d))])
    K = kkt_matrix(qp, sol)
    try:
        x = solve_linear(K, rhs)
    except SingularSystemError as exc:
        raise DegeneracyError(f"KKT matrix singular: {exc}") from exc
    return x[:m]


def qp_jacobian_wrt_h(qp: QPInstance, sol: QPSolution) -> np.ndarray:
    """dz*/dh as an (m, k) matrix; columns of inactive rows are zero."""
    J = qp_differential(qp, sol, dh=np.eye(qp.k))
    inactive = np.ones(qp.k, dtype=bool)
    inactive[list(sol.active_set)] = False
    # exact zeros in exact arithmetic; drop the LU round-off
    J[:, inactive] = 0.0
    return J


def solve_and_jacobian(qp: QPInstance) -> tuple[QPInstance, QPSolution, np.ndarray | None]:
    """Solve and differentiate w.r.t. h, with one loosen-and-retry on degeneracy.

    Returns the (possibly perturbed) instance actually used, its solution, and
    the Jacobian, or ``None`` for the Jacobian when the solve was not optimal.
    """
    sol = solve_qp(qp)
    if not sol.optimal:
        return qp, sol, None
    try:
        return qp, sol, qp_jacobian_wrt_h(qp, sol)
    except DegeneracyError:
        log.debug("degenerate active set %s, retrying with h + %g", sol.active_set, DEGENERACY_PERTURBATION)
    qp2 = QPInstance(qp.Q, qp.q, qp.G, qp.h + DEGENERACY_PERTURBATION, qp.A, qp.b)
    sol2 = solve_qp(qp2)
    if not sol2.optimal:
        return qp2, sol2, None
    return qp2, sol2, qp_jacobian_wrt_h(qp2, sol2)
