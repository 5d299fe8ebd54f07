"""Sparse convex QP solver: minimize 0.5 x'Px + q'x  s.t.  l <= Ax <= u.

Operator-splitting (ADMM) iteration in the style of first-order QP solvers:
a quasi-definite KKT system is factorized once and reused, constraints are
handled by projection onto [l, u], and the penalty parameter is rescaled
periodically from the residual balance.  Warm starting across solves is
supported because that dominates receding-horizon use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import splu

from stepnav.errors import InvalidArgumentError, MapFormatError

SOLVED = "solved"
MAX_ITER = "max_iter"
PRIMAL_INFEASIBLE = "primal_infeasible"


@dataclass
class QpProblem:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.P = sp.csc_matrix(self.P)
        self.A = sp.csc_matrix(self.A)
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.l = np.asarray(self.l, dtype=float).ravel()
        self.u = np.asarray(self.u, dtype=float).ravel()
        n = self.P.shape[0]
        if self.P.shape != (n, n) or self.q.shape != (n,):
            raise InvalidArgumentError("P/q dimension mismatch")
        if self.A.shape[1] != n or self.l.shape != self.u.shape \
                or self.A.shape[0] != self.l.shape[0]:
            raise InvalidArgumentError("A/l/u dimension mismatch")
        asym = abs(self.P - self.P.T).max() if self.P.nnz else 0.0
        if asym > 1e-12 * max(1.0, abs(self.P).max()):
            raise InvalidArgumentError(f"P is not symmetric (asymmetry {asym:g})")
        if np.any(self.l > self.u):
            raise InvalidArgumentError("constraint bounds require l <= u")

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float

    @property
    def solved(self) -> bool:
        return self.status == SOLVED


@dataclass
class QpSettings:
    tol_abs: float = 1e-6
    tol_rel: float = 1e-6
    max_iter: int = 4000
    rho: float = 0.1
    sigma: float = 1e-6
    relax: float = 1.6
    check_interval: int = 25
    rho_update_interval: int = 50
    infeas_check_after: int = 500
    eps_infeas: float = 1e-5


def _rho_vector(rho, l, u):
    # stiffer penalty on equality rows
    eq = (u - l) < 1e-12
    vec = np.full(l.shape, rho)
    vec[eq] = rho * 1e3
    return np.clip(vec, 1e-6, 1e6)


_DENSE_KKT_MAX = 300  # receding-horizon KKT systems are tiny; dense LU wins


class _KktSolver:
    """LU of the quasi-definite KKT matrix, with cheap rho-diagonal updates.

    The structure is assembled once; penalty rescaling only touches the
    lower-right diagonal, so refactorization reuses the stored pattern.
    """

    def __init__(self, P, A, sigma, rho_vec):
        n, m = P.shape[0], A.shape[0]
        self._n = n
        self._dense = (n + m) <= _DENSE_KKT_MAX
        if self._dense:
            kkt = np.zeros((n + m, n + m))
            kkt[:n, :n] = P.toarray()
            kkt[:n, :n] += sigma * np.eye(n)
            Ad = A.toarray()
            kkt[:n, n:] = Ad.T
            kkt[n:, :n] = Ad
            self._kkt = kkt
            self._diag = np.arange(n, n + m)
        else:
            Ps = (P + sigma * sp.eye(n)).tocoo()
            Ac = A.tocoo()
            rows = np.concatenate([Ps.row, Ac.row + n, Ac.col,
                                   np.arange(n, n + m)])
            cols = np.concatenate([Ps.col, Ac.col, Ac.row + n,
                                   np.arange(n, n + m)])
            data = np.concatenate([Ps.data, Ac.data, Ac.data, np.ones(m)])
            kkt = sp.coo_matrix((data, (rows, cols)),
                                shape=(n + m, n + m)).tocsc()
            kkt.sort_indices()
            # locate the rho-diagonal slots inside the csc data array
            diag = np.empty(m, dtype=np.int64)
            for i in range(m):
                col = n + i
                lo, hi = kkt.indptr[col], kkt.indptr[col + 1]
                diag[i] = lo + np.searchsorted(kkt.indices[lo:hi], col)
            self._kkt = kkt
            self._diag = diag
        self.refactor(rho_vec)

    def refactor(self, rho_vec):
        if self._dense:
            n = self._n
            self._kkt[self._diag, self._diag] = -1.0 / rho_vec
            self._fac = lu_factor(self._kkt, check_finite=False)
        else:
            self._kkt.data[self._diag] = -1.0 / rho_vec
            self._fac = splu(self._kkt)

    def solve(self, rhs):
        if self._dense:
            return lu_solve(self._fac, rhs, check_finite=False)
        return self._fac.solve(rhs)


def solve_qp(problem: QpProblem, settings: QpSettings | None = None,
             warm_x=None, warm_y=None) -> QpSolution:
    """Solve the QP; deterministic for identical inputs and warm starts."""
    st = settings or QpSettings()
    n, m = problem.n, problem.m
    P, q, A, l, u = problem.P, problem.q, problem.A, problem.l, problem.u

    x = np.zeros(n) if warm_x is None else np.asarray(warm_x, dtype=float).copy()
    y = np.zeros(m) if warm_y is None else np.asarray(warm_y, dtype=float).copy()

    if m == 0:
        lu_p = splu(sp.csc_matrix(P + st.sigma * sp.eye(n)))
        x = lu_p.solve(-q)
        # refine away the sigma-regularization error down to the tolerance
        rd = float(np.max(np.abs(P @ x + q))) if n else 0.0
        for _ in range(50):
            if rd <= st.tol_abs + st.tol_rel * max(np.max(np.abs(q)), 1e-30):
                break
            x -= lu_p.solve(P @ x + q)
            rd = float(np.max(np.abs(P @ x + q)))
        return QpSolution(x, y, SOLVED, 0, 0.0, rd)

    rho_vec = _rho_vector(st.rho, l, u)
    lu = _KktSolver(P, A, st.sigma, rho_vec)
    z = np.clip(A @ x, l, u)

    status = MAX_ITER
    rp = rd = np.inf
    it = 0
    rhs = np.empty(n + m)
    for it in range(1, st.max_iter + 1):
        rhs[:n] = st.sigma * x - q
        rhs[n:] = z - y / rho_vec
        sol = lu.solve(rhs)
        x_t = sol[:n]
        nu = sol[n:]
        z_t = z + (nu - y) / rho_vec
        x = st.relax * x_t + (1 - st.relax) * x
        z_r = st.relax * z_t + (1 - st.relax) * z
        z_new = np.clip(z_r + y / rho_vec, l, u)
        dy = rho_vec * (z_r - z_new)
        y = y + dy
        z = z_new

        if it % st.check_interval == 0 or it == st.max_iter:
            Ax = A @ x
            Px = P @ x
            Aty = A.T @ y
            rp = float(np.max(np.abs(Ax - z)))
            rd = float(np.max(np.abs(Px + q + Aty)))
            eps_p = st.tol_abs + st.tol_rel * max(
                np.max(np.abs(Ax)), np.max(np.abs(z)), 1e-30)
            eps_d = st.tol_abs + st.tol_rel * max(
                np.max(np.abs(Px)), np.max(np.abs(Aty)), np.max(np.abs(q)), 1e-30)
            if rp <= eps_p and rd <= eps_d:
                status = SOLVED
                break

            if it >= st.infeas_check_after and _primal_infeasible(
                    problem, dy, st.eps_infeas):
                status = PRIMAL_INFEASIBLE
                break

            if it % st.rho_update_interval == 0:
                ratio = (rp / max(eps_p, 1e-30)) / max(rd / max(eps_d, 1e-30), 1e-30)
                scale = np.sqrt(ratio)
                if scale > 5.0 or scale < 0.2:
                    st = QpSettings(**{**st.__dict__, "rho": float(
                        np.clip(st.rho * scale, 1e-6, 1e6))})
                    rho_vec = _rho_vector(st.rho, l, u)
                    lu.refactor(rho_vec)

    return QpSolution(x, y, status, it, rp, rd)


def _primal_infeasible(problem, dy, eps) -> bool:
    norm_dy = np.max(np.abs(dy)) if len(dy) else 0.0
    if norm_dy < 1e-12:
        return False
    dyn = dy / norm_dy
    if np.max(np.abs(problem.A.T @ dyn)) > eps:
        return False
    pos = np.maximum(dyn, 0.0)
    neg = np.minimum(dyn, 0.0)
    # infinite bounds with active sign can never certify infeasibility
    if np.any(pos[np.isinf(problem.u)] > eps) or np.any(neg[np.isinf(problem.l)] < -eps):
        return False
    support = float(np.sum(problem.u[pos > 0] * pos[pos > 0])
                    + np.sum(problem.l[neg < 0] * neg[neg < 0]))
    return support < -eps


def save_problem(problem: QpProblem, path) -> None:
    def triplets(mat):
        coo = mat.tocoo()
        return {"rows": coo.row.tolist(), "cols": coo.col.tolist(),
                "vals": coo.data.tolist()}

    doc = {"n": problem.n, "m": problem.m,
           "P": triplets(problem.P), "A": triplets(problem.A),
           "q": problem.q.tolist(),
           "l": [None if np.isneginf(v) else v for v in problem.l],
           "u": [None if np.isposinf(v) else v for v in problem.u]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_problem(path) -> QpProblem:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    try:
        n, m = doc["n"], doc["m"]
        P = sp.coo_matrix((doc["P"]["vals"], (doc["P"]["rows"], doc["P"]["cols"])),
                          shape=(n, n)).tocsc()
        A = sp.coo_matrix((doc["A"]["vals"], (doc["A"]["rows"], doc["A"]["cols"])),
                          shape=(m, n)).tocsc()
        l = np.array([-np.inf if v is None else v for v in doc["l"]])
        u = np.array([np.inf if v is None else v for v in doc["u"]])
        return QpProblem(P=P, q=np.array(doc["q"]), A=A, l=l, u=u)
    except (KeyError, TypeError, ValueError) as e:
        raise MapFormatError(f"{path}: malformed QP problem file ({e})") from e
