"""Small dense LMI feasibility by common-margin maximization.

Given affine maps ``F_k(y)`` into symmetric matrices, solve::

    maximize t   subject to   F_k(y) - m_k I >= t I   for all k,   |y_i| <= R

with a primal log-barrier path-following method. The problem is feasible
(with the requested margins) iff the optimal ``t`` is positive; ``t`` itself
is a quantitative certificate that the tau line search in the terminal
design compares across candidates.

Unknowns are declared as named symmetric, rectangular or scalar blocks; the
affine structure is recovered by evaluating each constraint at the origin
and at the unit vectors of the parameter space, so constraint builders can
be written as ordinary matrix expressions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from .errors import MaxIterationsError, ModelError

RESIDUAL_TOL = 1e-8


def symmetrize(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + M.T)


def min_eigenvalue(M) -> float:
    """Smallest eigenvalue of the symmetric part of ``M``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.isfinite(M).all():
        raise ModelError("matrix has non-finite entries")
    return float(np.linalg.eigvalsh(symmetrize(M))[0])


@dataclass
class _Variable:
    name: str
    kind: str  # "sym" | "mat" | "scalar"
    shape: tuple

    @property
    def size(self) -> int:
        if self.kind == "sym":
            d = self.shape[0]
            return d * (d + 1) // 2
        return int(np.prod(self.shape))

    def unpack(self, v: np.ndarray):
        if self.kind == "scalar":
            return float(v[0])
        if self.kind == "mat":
            return v.reshape(self.shape)
        d = self.shape[0]
        M = np.zeros((d, d))
        M[np.triu_indices(d)] = v
        return M + np.triu(M, 1).T

    def start(self) -> np.ndarray:
        if self.kind == "sym":
            return np.eye(self.shape[0])[np.triu_indices(self.shape[0])]
        if self.kind == "scalar":
            return np.ones(1)
        return np.zeros(self.size)


@dataclass
class _Constraint:
    build: Callable
    margin: float
    name: str


@dataclass
class LmiProblem:
    """Collection of unknowns and affine matrix inequalities ``build(vals) >= margin*I``."""

    variables: list = field(default_factory=list)
    constraints: list = field(default_factory=list)

    def add_symmetric(self, name: str, dim: int):
        self.variables.append(_Variable(name, "sym", (dim, dim)))

    def add_matrix(self, name: str, rows: int, cols: int):
        self.variables.append(_Variable(name, "mat", (rows, cols)))

    def add_scalar(self, name: str):
        self.variables.append(_Variable(name, "scalar", (1,)))

    def add_constraint(self, build: Callable, margin: float = 0.0, name: str | None = None):
        self.constraints.append(_Constraint(build, float(margin), name or f"lmi{len(self.constraints)}"))

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.variables)

    def unpack(self, y: np.ndarray) -> dict:
        out, k = {}, 0
        for v in self.variables:
            out[v.name] = v.unpack(y[k : k + v.size])
            k += v.size
        return out

    def start_point(self) -> np.ndarray:
        return np.concatenate([v.start() for v in self.variables]) if self.variables else np.zeros(0)

    def affine_data(self):
        """Per constraint ``(F0, Fs)`` with ``F(y) = F0 + sum_i y_i Fs[i]``."""
        p = self.num_params
        zero = self.unpack(np.zeros(p))
        data = []
        for c in self.constraints:
            F0 = symmetrize(c.build(zero))
            Fs = np.empty((p,) + F0.shape)
            for i in range(p):
                e = np.zeros(p)
                e[i] = 1.0
                Fs[i] = symmetrize(c.build(self.unpack(e))) - F0
            data.append((F0, Fs))
        return data

    def evaluate(self, values: dict) -> list:
        """Constraint matrices minus their margins at a given assignment."""
        out = []
        for c in self.constraints:
            M = symmetrize(c.build(values))
            out.append(M - c.margin * np.eye(M.shape[0]))
        return out


class LmiMaxIterationsError(MaxIterationsError):
    def __init__(self, values, margin, eigs, iterations):
        super().__init__(f"LMI solver hit the Newton cap ({iterations}) at margin {margin:.3e}",
                         status="MaxIterations", last_iterate=values)
        self.margin = margin
        self.min_eigenvalues = eigs


@dataclass(frozen=True)
class LmiResult:
    feasible: bool
    margin: float
    values: dict
    min_eigenvalues: tuple
    iterations: int
    status: str

    def __bool__(self):
        return self.feasible


def _chol(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return None


def _slacks(data, margins, y, t):
    return [F0 + np.tensordot(y, Fs, axes=1) - (m + t) * np.eye(F0.shape[0]) for (F0, Fs), m in zip(data, margins)]


def _barrier_value(data, margins, y, t, R):
    """Log-barrier value at ``(y, t)``, or None outside the domain."""
    gap = R * R - y * y
    if (gap <= 0).any():
        return None
    val = np.log(gap).sum()
    for S in _slacks(data, margins, y, t):
        L = _chol(S)
        if L is None:
            return None
        val += 2.0 * np.log(np.diag(L)).sum()
    return val


def _barrier_derivatives(data, margins, y, t, R):
    """Gradient and Hessian of the barrier in ``(y, t)``.

    With ``S = L L'`` and ``M_a = L^-1 D_a L^-T`` for each direction ``D_a``,
    the gradient is ``tr(M_a)`` and the Hessian ``-<M_a, M_b>``.
    """
    p = y.size
    g = np.zeros(p + 1)
    Hm = np.zeros((p + 1, p + 1))
    for S, (F0, Fs) in zip(_slacks(data, margins, y, t), data):
        d = F0.shape[0]
        Li = solve_triangular(np.linalg.cholesky(S), np.eye(d), lower=True)
        M = np.empty((p + 1, d, d))
        M[:p] = Li @ Fs @ Li.T
        M[p] = -Li @ Li.T
        g += np.trace(M, axis1=1, axis2=2)
        flat = M.reshape(p + 1, -1)
        Hm -= flat @ flat.T
    gap = R * R - y * y
    g[:p] += -2.0 * y / gap
    Hm[np.arange(p), np.arange(p)] += -2.0 * (R * R + y * y) / gap**2
    return g, Hm


def solve_feasibility(
    prob: LmiProblem,
    radius: float = 1e4,
    tol: float = 1e-9,
    max_newton: int = 400,
    stop_margin: float | None = None,
) -> LmiResult:
    """Maximize the common margin ``t``; feasible iff ``t* > 0``.

    ``stop_margin`` ends the path early once ``t`` exceeds it (useful when
    only a sign decision is needed). The returned assignment is re-checked
    with an independent eigenvalue computation.
    """
    data = prob.affine_data()
    margins = [c.margin for c in prob.constraints]
    y = prob.start_point()
    if (np.abs(y) >= radius).any():
        raise ModelError("start point outside the search box")
    t = min(min_eigenvalue(F0 + np.tensordot(y, Fs, axes=1)) - m for (F0, Fs), m in zip(data, margins)) - 1.0
    barrier_dim = sum(F0.shape[0] for F0, _ in data) + y.size
    mu = 1.0
    newton = 0
    status = "Solved"
    val = _barrier_value(data, margins, y, t, radius)
    while True:
        final = mu * barrier_dim <= tol * max(1.0, abs(t))
        # centering: minimize -t - mu * barrier; loose for intermediate mu
        center_tol = 1e-14 if final else 1e-2
        for _ in range(100):
            g, Hm = _barrier_derivatives(data, margins, y, t, radius)
            grad = -mu * g
            grad[-1] -= 1.0
            hess = -mu * Hm
            try:
                step = -np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
            dec = -grad @ step
            newton += 1
            if dec / mu <= center_tol or newton >= max_newton:
                break
            f0 = -t - mu * val
            s = 1.0
            while s > 1e-12:
                yn, tn = y + s * step[:-1], t + s * step[-1]
                trial = _barrier_value(data, margins, yn, tn, radius)
                if trial is not None and -tn - mu * trial <= f0 - 0.25 * s * dec:
                    y, t, val = yn, tn, trial
                    break
                s *= 0.5
            else:
                break
        if newton >= max_newton:
            status = "MaxIterations"
            break
        if final or (stop_margin is not None and t > stop_margin):
            break
        mu *= 0.1
    values = prob.unpack(y)
    eigs = tuple(min_eigenvalue(M) for M in prob.evaluate(values))
    worst = min(eigs) if eigs else np.inf
    feasible = bool(t > 0 and worst >= -RESIDUAL_TOL)
    if status == "MaxIterations" and not feasible:
        raise LmiMaxIterationsError(values, t, eigs, newton)
    return LmiResult(feasible, float(t), values, eigs, newton, status)
