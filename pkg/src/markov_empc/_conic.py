"""Convex QP / SOCP front end on top of Clarabel, with active-set polishing.

Problems have the form::

    minimize    1/2 u'Hu + f'u
    subject to  A_eq u = b_eq
                G u <= g
                ||M_k u + m_k|| <= r_k      (one entry per cone)

The interior-point answer is refined by solving the KKT system of the
detected active set exactly; the refined point is kept only if it is primal
feasible and its multipliers have the right sign, so polishing never makes a
solution worse, it just removes the interior-point bias (~1e-9) that would
otherwise show up in closed-loop tests at the equilibrium.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import clarabel
import numpy as np
from scipy import sparse

from .errors import InfeasibleError, MaxIterationsError, NoConvergenceError, SolverError

ACTIVE_TOL = 1e-7
FEAS_TOL = 1e-8


@dataclass
class ConicProblem:
    H: np.ndarray
    f: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    G: np.ndarray | None = None
    g: np.ndarray | None = None
    cones: list = field(default_factory=list)  # (M, m, r)

    @property
    def dim(self):
        return self.f.size

    def objective(self, u):
        return float(0.5 * u @ self.H @ u + self.f @ u)

    def residuals(self, u) -> dict:
        out = {"eq": 0.0, "ineq": 0.0, "cone": 0.0}
        if self.A_eq is not None and self.A_eq.size:
            out["eq"] = float(np.abs(self.A_eq @ u - self.b_eq).max())
        if self.G is not None and self.G.size:
            out["ineq"] = float(max(0.0, (self.G @ u - self.g).max()))
        for M, m, r in self.cones:
            out["cone"] = max(out["cone"], float(np.linalg.norm(M @ u + m) - r))
        return out


@dataclass(frozen=True)
class ConicSolution:
    u: np.ndarray
    objective: float
    status: str
    iterations: int
    kkt_residual: float
    polished: bool
    eq_dual: np.ndarray
    ineq_dual: np.ndarray


def _settings(tol, max_iter):
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.tol_gap_abs = tol
    s.tol_gap_rel = tol
    s.tol_feas = tol
    s.tol_ktratio = 1e-8
    s.max_iter = max_iter
    s.presolve_enable = True
    return s


def solve_conic(prob: ConicProblem, tol: float = 1e-10, max_iter: int = 200, polish: bool = True) -> ConicSolution:
    n = prob.dim
    blocks, rhs, cones = [], [], []
    n_eq = 0 if prob.A_eq is None else prob.A_eq.shape[0]
    n_in = 0 if prob.G is None else prob.G.shape[0]
    if n_eq:
        blocks.append(prob.A_eq)
        rhs.append(prob.b_eq)
        cones.append(clarabel.ZeroConeT(n_eq))
    if n_in:
        blocks.append(prob.G)
        rhs.append(prob.g)
        cones.append(clarabel.NonnegativeConeT(n_in))
    for M, m, r in prob.cones:
        blocks.append(np.vstack([np.zeros((1, n)), -M]))
        rhs.append(np.concatenate([[r], m]))
        cones.append(clarabel.SecondOrderConeT(M.shape[0] + 1))
    if not blocks:
        blocks.append(np.zeros((0, n)))
        rhs.append(np.zeros(0))
    A = sparse.csc_matrix(np.vstack(blocks))
    b = np.concatenate(rhs)
    H = sparse.csc_matrix(np.triu(0.5 * (prob.H + prob.H.T)))
    solver = clarabel.DefaultSolver(H, prob.f.astype(float), A, b, cones, _settings(tol, max_iter))
    sol = solver.solve()
    status = str(sol.status)
    u = np.array(sol.x)
    z = np.array(sol.z)
    if "PrimalInfeasible" in status:
        raise InfeasibleError("problem is infeasible", status=status, certificate=z)
    if "DualInfeasible" in status:
        raise NoConvergenceError("objective unbounded below", status=status, last_iterate=u)
    if "MaxIterations" in status or "MaxTime" in status:
        raise MaxIterationsError("iteration cap reached", status=status, last_iterate=u)
    if status not in ("Solved", "AlmostSolved", "SolverStatus.Solved", "SolverStatus.AlmostSolved"):
        if not np.isfinite(u).all():
            raise NoConvergenceError(f"solver stopped with status {status}", status=status, last_iterate=u)
        res = prob.residuals(u)
        if max(res.values()) > 1e-6:
            raise NoConvergenceError(f"solver stopped with status {status}", status=status, last_iterate=u)
    eq_dual = z[:n_eq]
    ineq_dual = z[n_eq : n_eq + n_in]
    polished = False
    if polish:
        refined = _polish(prob, u, ineq_dual)
        if refined is not None:
            u, eq_dual, ineq_dual = refined
            polished = True
    kkt = _kkt_residual(prob, u, eq_dual, ineq_dual) if not prob.cones else float(
        max(prob.residuals(u).values())
    )
    return ConicSolution(u, prob.objective(u), status, int(sol.iterations), kkt, polished, eq_dual, ineq_dual)


def _kkt_residual(prob, u, y, z) -> float:
    grad = prob.H @ u + prob.f
    if prob.A_eq is not None and prob.A_eq.size:
        grad = grad + prob.A_eq.T @ y
    if prob.G is not None and prob.G.size:
        grad = grad + prob.G.T @ z
    res = prob.residuals(u)
    comp = 0.0
    if prob.G is not None and prob.G.size:
        comp = float(np.abs(z * (prob.G @ u - prob.g)).max())
    return float(max(np.abs(grad).max(), res["eq"], res["ineq"], comp))


def _polish(prob: ConicProblem, u, ineq_dual):
    for M, m, r in prob.cones:
        if np.linalg.norm(M @ u + m) > r - ACTIVE_TOL * max(1.0, r):
            return None
    n = prob.dim
    n_in = 0 if prob.G is None else prob.G.shape[0]
    active = np.zeros(n_in, dtype=bool)
    if n_in:
        slack = prob.g - prob.G @ u
        active = (slack <= ACTIVE_TOL * (1.0 + np.abs(prob.g))) | (ineq_dual > ACTIVE_TOL)
    rows = []
    rhs = []
    if prob.A_eq is not None and prob.A_eq.size:
        rows.append(prob.A_eq)
        rhs.append(prob.b_eq)
    if active.any():
        rows.append(prob.G[active])
        rhs.append(prob.g[active])
    C = np.vstack(rows) if rows else np.zeros((0, n))
    d = np.concatenate(rhs) if rhs else np.zeros(0)
    k = C.shape[0]
    K = np.block([[prob.H, C.T], [C, np.zeros((k, k))]])
    sol, *_ = np.linalg.lstsq(K, np.concatenate([-prob.f, d]), rcond=None)
    if np.abs(K @ sol - np.concatenate([-prob.f, d])).max() > 1e-9 * (1.0 + np.abs(prob.f).max()):
        return None
    u_new, mult = sol[:n], sol[n:]
    n_eq = 0 if prob.A_eq is None else prob.A_eq.shape[0]
    z_act = mult[n_eq:]
    if (z_act < -1e-9).any():
        return None
    res = prob.residuals(u_new)
    if res["ineq"] > FEAS_TOL or res["cone"] > FEAS_TOL or res["eq"] > FEAS_TOL:
        return None
    z = np.zeros(n_in)
    z[active] = z_act
    return u_new, mult[:n_eq], z


__all__ = ["ConicProblem", "ConicSolution", "solve_conic", "SolverError"]
