"""Scenario-tree economic MPC problems and their receding-horizon laws.

Four problems are supported, selected by :class:`OcpSpec`:

* terminal equality (``x_N`` pinned to the steady state of the bet node of
  the stage-(N-1) mode, no terminal cost),
* terminal set (``x_N`` in the ellipsoid of the leaf mode, quadratic terminal
  cost),
* and the rotated version of each, where the stage cost is replaced by the
  stage cost minus the expected storage increase (and minus ``l_s`` for the
  terminal-set problem), and the terminal cost is shifted by the storage.

The decision variables are one input per non-leaf tree node. States are
eliminated along parent links, so a node's state is an affine function of the
inputs of its ancestors; siblings share a state because the successor state
depends only on the parent's mode.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field

import numpy as np

from ._conic import ConicProblem, solve_conic
from .errors import InfeasibleError, MaxIterationsError, ModelError, NoConvergenceError, SolverError
from .scenario_tree import ScenarioTree, build_tree
from .steady_state import SteadyStateProfile
from .system import LinearDynamics, QuadraticCost, StorageFunction, SwitchingSystem, storage_drift

KKT_TOL = 1e-6
STATIONARITY_TOL = 1e-5
FEASIBILITY_TOL = 1e-8


class Formulation(str, enum.Enum):
    TERMINAL_EQUALITY = "terminal_equality"
    TERMINAL_SET = "terminal_set"


@dataclass(frozen=True, eq=False)
class OcpSpec:
    system: SwitchingSystem
    profile: SteadyStateProfile
    horizon: int
    formulation: Formulation = Formulation.TERMINAL_EQUALITY
    rotated: bool = False
    storage: StorageFunction | None = None
    ingredients: object | None = None  # terminal.TerminalIngredients
    node_cap: int = 10**6
    max_scp_iterations: int = 100

    def __post_init__(self):
        object.__setattr__(self, "formulation", Formulation(self.formulation))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.formulation is Formulation.TERMINAL_SET and self.ingredients is None:
            raise ValueError("the terminal-set problem needs terminal ingredients")
        if self.rotated:
            if self.storage is None:
                raise ValueError("rotated problems need a storage function")
            if not self.profile.common_equilibrium:
                raise ValueError("rotated problems are only defined for a common equilibrium")

    def with_rotation(self, rotated: bool) -> "OcpSpec":
        return OcpSpec(self.system, self.profile, self.horizon, self.formulation, rotated,
                       self.storage, self.ingredients, self.node_cap, self.max_scp_iterations)

    @property
    def ell_s(self) -> float:
        return self.profile.common_cost

    @property
    def lambda_s(self) -> float:
        return self.storage.steady_value(self.profile.common_state)


@dataclass(frozen=True, eq=False)
class ControlPolicy:
    """Optimal causal policy: one input per non-leaf node of ``tree``.

    ``value`` is the objective of the problem that was solved (rotated or
    not); ``states`` holds the predicted state at every node.
    """

    tree: ScenarioTree
    inputs: np.ndarray
    states: np.ndarray
    value: float
    status: str
    kkt_residual: float
    iterations: int
    method: str

    @property
    def first_input(self) -> np.ndarray:
        return self.inputs[0]


# ----------------------------------------------------------------------------
# cost data


def _rotate_quadratic(sys, storage, theta, W, w, c):
    """Quadratic data of ``l - (expected storage increase)`` for linear dynamics."""
    n = sys.state_dim
    f = sys.dynamics[theta]
    P = sys.chain.transition[theta]
    Lam = sum(P[j] * storage.quadratic[j][0] for j in sys.chain.cover(theta))
    mu = sum(P[j] * storage.quadratic[j][1] for j in sys.chain.cover(theta))
    m0 = sum(P[j] * storage.quadratic[j][2] for j in sys.chain.cover(theta))
    L_t, mu_t, m_t = storage.quadratic[theta]
    C = np.hstack([f.A, f.B])
    W_r = W - C.T @ Lam @ C
    W_r[:n, :n] += L_t
    w_r = w - (2.0 * C.T @ Lam @ f.w + C.T @ mu)
    w_r[:n] += mu_t
    c_r = c - (f.w @ Lam @ f.w + mu @ f.w + m0) + m_t
    return W_r, w_r, c_r


class _QuadFn:
    """``z' W z + w' z + c`` on ``z = (x, u)`` (or on ``x`` alone)."""

    def __init__(self, W, w, c):
        self.W, self.w, self.c = np.asarray(W, float), np.asarray(w, float), float(c)

    def value(self, z):
        return float(z @ self.W @ z + self.w @ z + self.c)

    def derivs(self, z):
        return self.value(z), 2.0 * self.W @ z + self.w, 2.0 * self.W


class _GenericFn:
    """Callable cost with finite-difference derivatives."""

    def __init__(self, fn, h=1e-5):
        self.fn, self.h = fn, h

    def value(self, z):
        return float(self.fn(z))

    def derivs(self, z):
        d = z.size
        h = self.h * (1.0 + np.linalg.norm(z))
        f0 = self.fn(z)
        g = np.empty(d)
        Hm = np.empty((d, d))
        E = np.eye(d) * h
        for a in range(d):
            g[a] = (self.fn(z + E[a]) - self.fn(z - E[a])) / (2 * h)
            Hm[a, a] = (self.fn(z + E[a]) - 2 * f0 + self.fn(z - E[a])) / h**2
            for b in range(a):
                Hm[a, b] = Hm[b, a] = (
                    self.fn(z + E[a] + E[b]) - self.fn(z + E[a] - E[b])
                    - self.fn(z - E[a] + E[b]) + self.fn(z - E[a] - E[b])
                ) / (4 * h * h)
        return float(f0), g, Hm


class _SystemCostFn:
    def __init__(self, sys, theta, shift=0.0):
        self.sys, self.theta, self.shift = sys, theta, shift
        self.n = sys.state_dim

    def value(self, z):
        return self.sys.stage_cost(z[: self.n], z[self.n :], self.theta) - self.shift

    def derivs(self, z):
        x, u = z[: self.n], z[self.n :]
        gx, gu = self.sys.cost_gradient(x, u, self.theta)
        return self.value(z), np.concatenate([gx, gu]), np.asarray(self.sys.cost_hessian(x, u, self.theta))


def _terminal_quadratic(ing, theta):
    """``V_f(x, theta) = 1/2 (x-x_s)'P(x-x_s) + p'(x-x_s)`` as data on ``x``."""
    P, p, xs = ing.P_f[theta], ing.p[theta], ing.x_s
    return 0.5 * P, p - P @ xs, 0.5 * xs @ P @ xs - p @ xs


def stage_cost_functions(spec: OcpSpec, quadratic: bool):
    """Per-mode stage cost objects for the problem described by ``spec``."""
    sys = spec.system
    shift = spec.ell_s if (spec.rotated and spec.formulation is Formulation.TERMINAL_SET) else 0.0
    out = []
    for theta in range(sys.num_modes):
        cost = sys.costs[theta]
        if quadratic:
            W, w, c = cost.W.copy(), cost.w.copy(), cost.c
            if spec.rotated:
                W, w, c = _rotate_quadratic(sys, spec.storage, theta, W, w, c)
            out.append(_QuadFn(W, w, c - shift))
        elif spec.rotated:
            n = sys.state_dim

            def fn(z, theta=theta):
                x, u = z[:n], z[n:]
                return sys.stage_cost(x, u, theta) - storage_drift(sys, spec.storage, x, u, theta) - shift

            out.append(_GenericFn(fn))
        else:
            out.append(_SystemCostFn(sys, theta))
    return out


def terminal_cost_functions(spec: OcpSpec):
    if spec.formulation is not Formulation.TERMINAL_SET:
        return None
    ing = spec.ingredients
    out = []
    for theta in range(spec.system.num_modes):
        W, w, c = _terminal_quadratic(ing, theta)
        if spec.rotated:
            L, mu, m0 = (
                spec.storage.quadratic[theta] if spec.storage.quadratic is not None else (None, None, None)
            )
            shift = ing.terminal_cost(ing.x_s, theta) + spec.lambda_s
            if L is None:
                base = _QuadFn(W, w, c)
                out.append(_GenericFn(lambda x, b=base, t=theta: b.value(x) + spec.storage(x, t) - shift))
                continue
            W, w, c = W + L, w + mu, c + m0
            c -= shift
        out.append(_QuadFn(W, w, c))
    return out


# ----------------------------------------------------------------------------
# tree structure shared by both solution paths


@dataclass
class _TreeData:
    tree: ScenarioTree
    D: int  # decision nodes
    m: int
    n: int
    # condensed affine state maps x_node = Sx x0 + Su U + sc (convex path)
    Sx: np.ndarray | None = None
    Su: np.ndarray | None = None
    sc: np.ndarray | None = None
    # objective 1/2 U'HU + (F x0 + f0)'U
    H: np.ndarray | None = None
    F: np.ndarray | None = None
    f0: np.ndarray | None = None
    # inequality rows G U <= g0 + Gx x0, equality A U = b0 + Bx x0
    G: np.ndarray | None = None
    g0: np.ndarray | None = None
    Gx: np.ndarray | None = None
    const_rows: tuple | None = None  # rows with no U dependence: (cx, c0)
    A: np.ndarray | None = None
    b0: np.ndarray | None = None
    Bx: np.ndarray | None = None
    cones: list = field(default_factory=list)  # (M, Mx, m0, r) : ||M U + Mx x0 + m0|| <= r
    penalized: bool = False


def _eq_nodes(tree: ScenarioTree):
    """One representative leaf per stage-(N-1) node and its target mode."""
    N = tree.horizon
    return [(tree.children[p][0], int(tree.mode[p])) for p in tree.nodes_at(N - 1)]


def _ellipsoid_factor(E, c):
    L = np.linalg.cholesky(0.5 * (E + E.T))
    return L.T, float(np.sqrt(c))


class OcpSolver:
    """Solves an :class:`OcpSpec` at arbitrary ``(x, theta)``.

    Tree-dependent data are cached per root mode; the cache is guarded by a
    lock, and everything else is local to a call, so one instance may serve
    several threads.
    """

    def __init__(self, spec: OcpSpec):
        self.spec = spec
        sys = spec.system
        self.convex = sys.is_linear and sys.is_quadratic and (
            not spec.rotated or spec.storage.quadratic is not None
        )
        self.stage_fns = stage_cost_functions(spec, quadratic=self.convex)
        self.terminal_fns = terminal_cost_functions(spec)
        self._cache: dict[int, _TreeData] = {}
        self._lock = threading.Lock()
        if spec.formulation is Formulation.TERMINAL_SET:
            ing = spec.ingredients
            self._ellipsoids = [_ellipsoid_factor(ing.E[i], ing.c[i]) for i in range(sys.num_modes)]
        targets = []
        for i in range(sys.num_modes):
            targets.append(spec.profile.x_s[spec.profile.bet[i]])
        self._targets = np.array(targets)

    # -- public API ---------------------------------------------------------

    def tree(self, theta) -> ScenarioTree:
        return self._data(theta).tree

    def solve(self, x, theta, warm_start=None) -> ControlPolicy:
        sys = self.spec.system
        x = np.asarray(x, dtype=float).reshape(sys.state_dim)
        theta = sys.chain._check_mode(theta)
        data = self._data(theta)
        if self.convex:
            return self._solve_convex(data, x)
        return self._solve_scp(data, x, warm_start)

    def evaluate(self, x, theta, inputs):
        """Objective value and node states of a given policy (no constraint check)."""
        data = self._data(theta)
        states = self._rollout(data, np.asarray(x, dtype=float), inputs)
        return self._objective(data, states, inputs), states

    def constraint_violation(self, x, theta, inputs) -> float:
        data = self._data(theta)
        states = self._rollout(data, np.asarray(x, dtype=float), inputs)
        return self._violation(data, states, inputs)

    # -- tree data ------------------------------------------------------------

    def _data(self, theta) -> _TreeData:
        data = self._cache.get(theta)
        if data is None:
            with self._lock:
                data = self._cache.get(theta)
                if data is None:
                    data = self._build(theta)
                    self._cache[theta] = data
        return data

    def _build(self, theta) -> _TreeData:
        spec, sys = self.spec, self.spec.system
        tree = build_tree(sys.chain, theta, spec.horizon, spec.node_cap)
        n, m = sys.state_dim, sys.input_dim
        D = tree.num_decision_nodes
        data = _TreeData(tree, D, m, n)
        if self.convex:
            self._condense(data)
        return data

    def _condense(self, data: _TreeData):
        spec, sys, tree = self.spec, self.spec.system, data.tree
        n, m, D = data.n, data.m, data.D
        nv = D * m
        Nn = tree.num_nodes
        Sx = np.zeros((Nn, n, n))
        Su = np.zeros((Nn, n, nv))
        sc = np.zeros((Nn, n))
        Sx[0] = np.eye(n)
        for node in range(1, Nn):
            p = int(tree.parent[node])
            f = sys.dynamics[int(tree.mode[p])]
            Sx[node] = f.A @ Sx[p]
            Su[node] = f.A @ Su[p]
            Su[node][:, p * m : (p + 1) * m] += f.B
            sc[node] = f.A @ sc[p] + f.w
        data.Sx, data.Su, data.sc = Sx, Su, sc

        H = np.zeros((nv, nv))
        F = np.zeros((nv, n))
        f0 = np.zeros(nv)
        for node in range(D):
            fn = self.stage_fns[int(tree.mode[node])]
            Eu = np.zeros((m, nv))
            Eu[:, node * m : (node + 1) * m] = np.eye(m)
            T = np.vstack([Su[node], Eu])
            Tx = np.vstack([Sx[node], np.zeros((m, n))])
            t0 = np.concatenate([sc[node], np.zeros(m)])
            pi = tree.prob[node]
            H += 2 * pi * T.T @ fn.W @ T
            F += 2 * pi * T.T @ fn.W @ Tx
            f0 += pi * (2 * T.T @ fn.W @ t0 + T.T @ fn.w)
        if self.terminal_fns is not None:
            for leaf in tree.nodes_at(tree.horizon):
                fn = self.terminal_fns[int(tree.mode[leaf])]
                if not isinstance(fn, _QuadFn):
                    raise ModelError("convex path needs a quadratic terminal cost")
                pi = tree.prob[leaf]
                H += 2 * pi * Su[leaf].T @ fn.W @ Su[leaf]
                F += 2 * pi * Su[leaf].T @ fn.W @ Sx[leaf]
                f0 += pi * (2 * Su[leaf].T @ fn.W @ sc[leaf] + Su[leaf].T @ fn.w)
        H = 0.5 * (H + H.T)

        # polytopic constraints at decision nodes
        G_rows, g_rows, Gx_rows, const_cx, const_c0 = [], [], [], [], []
        for node in range(D):
            Y = sys.constraints[int(tree.mode[node])]
            Eu = np.zeros((m, nv))
            Eu[:, node * m : (node + 1) * m] = np.eye(m)
            rows = Y.Hx @ Su[node] + Y.Hu @ Eu
            rhs0 = Y.h - Y.Hx @ sc[node]
            rhsx = -Y.Hx @ Sx[node]
            dep = np.abs(rows).max(axis=1) > 1e-14
            G_rows.append(rows[dep])
            g_rows.append(rhs0[dep])
            Gx_rows.append(rhsx[dep])
            const_cx.append(rhsx[~dep])
            const_c0.append(rhs0[~dep])
        data.G = np.vstack(G_rows)
        data.g0 = np.concatenate(g_rows)
        data.Gx = np.vstack(Gx_rows)
        data.const_rows = (np.vstack(const_cx), np.concatenate(const_c0))

        if spec.formulation is Formulation.TERMINAL_EQUALITY:
            A_rows, b_rows, Bx_rows = [], [], []
            for leaf, parent_mode in _eq_nodes(tree):
                A_rows.append(Su[leaf])
                b_rows.append(self._targets[parent_mode] - sc[leaf])
                Bx_rows.append(-Sx[leaf])
            data.A = np.vstack(A_rows)
            data.b0 = np.concatenate(b_rows)
            data.Bx = np.vstack(Bx_rows)
        else:
            xs = spec.ingredients.x_s
            for leaf in tree.nodes_at(tree.horizon):
                Lt, r = self._ellipsoids[int(tree.mode[leaf])]
                data.cones.append((Lt @ Su[leaf], Lt @ Sx[leaf], Lt @ (sc[leaf] - xs), r))

        lam_min = np.linalg.eigvalsh(H).min() if nv else 0.0
        scale = max(1.0, np.abs(H).max()) if nv else 1.0
        if lam_min < -1e-10 * scale:
            # Off the terminal manifold a rotated objective may be indefinite; on
            # it, it equals the convex original plus a constant, so an exact
            # quadratic penalty on the equality residual restores convexity
            # without moving the minimizer.
            if data.A is None:
                raise ModelError(f"condensed Hessian is indefinite (min eigenvalue {lam_min:.3g})")
            rho = 1.0
            for _ in range(60):
                Hp = H + 2 * rho * data.A.T @ data.A
                if np.linalg.eigvalsh(Hp).min() >= 1e-9 * scale:
                    break
                rho *= 4.0
            else:
                raise ModelError("condensed Hessian stays indefinite on the terminal manifold")
            H = Hp
            F = F - 2 * rho * data.A.T @ data.Bx
            f0 = f0 - 2 * rho * data.A.T @ data.b0
            data.penalized = True
        data.H, data.F, data.f0 = H, F, f0

    # -- shared evaluation --------------------------------------------------

    def _rollout(self, data, x0, inputs):
        sys, tree = self.spec.system, data.tree
        U = np.asarray(inputs, dtype=float).reshape(data.D, data.m)
        X = np.empty((tree.num_nodes, data.n))
        X[0] = x0
        for node in range(1, tree.num_nodes):
            p = int(tree.parent[node])
            first = tree.children[p][0]
            X[node] = X[first] if node != first else sys.step(X[p], U[p], int(tree.mode[p]))
        return X

    def _objective(self, data, X, U):
        tree = data.tree
        U = np.asarray(U, dtype=float).reshape(data.D, data.m)
        total = 0.0
        for node in range(data.D):
            total += tree.prob[node] * self.stage_fns[int(tree.mode[node])].value(np.concatenate([X[node], U[node]]))
        if self.terminal_fns is not None:
            for leaf in tree.nodes_at(tree.horizon):
                total += tree.prob[leaf] * self.terminal_fns[int(tree.mode[leaf])].value(X[leaf])
        return float(total)

    def _terminal_residuals(self, data, X):
        """Equality residual vectors or ellipsoid excesses, per terminal constraint."""
        tree = data.tree
        if self.spec.formulation is Formulation.TERMINAL_EQUALITY:
            return [X[leaf] - self._targets[pm] for leaf, pm in _eq_nodes(tree)], []
        xs = self.spec.ingredients.x_s
        exc = []
        for leaf in tree.nodes_at(tree.horizon):
            Lt, r = self._ellipsoids[int(tree.mode[leaf])]
            exc.append(float(np.linalg.norm(Lt @ (X[leaf] - xs)) - r))
        return [], exc

    def _violation(self, data, X, U):
        sys, tree = self.spec.system, data.tree
        U = np.asarray(U, dtype=float).reshape(data.D, data.m)
        v = 0.0
        for node in range(data.D):
            v = max(v, sys.constraints[int(tree.mode[node])].violation(X[node], U[node]))
        eq, exc = self._terminal_residuals(data, X)
        for e in eq:
            v = max(v, float(np.abs(e).max()))
        for e in exc:
            v = max(v, e)
        return v

    # -- convex path --------------------------------------------------------

    def _solve_convex(self, data, x0) -> ControlPolicy:
        cx, c0 = data.const_rows
        if cx.size and (cx @ x0 + c0 < -FEASIBILITY_TOL).any():
            raise InfeasibleError("initial state violates a state-only constraint", status="InitialStateInfeasible")
        prob = ConicProblem(
            H=data.H,
            f=data.F @ x0 + data.f0,
            G=data.G,
            g=data.g0 + data.Gx @ x0,
        )
        if data.A is not None:
            prob.A_eq = data.A
            prob.b_eq = data.b0 + data.Bx @ x0
        for M, Mx, m0, r in data.cones:
            prob.cones.append((M, Mx @ x0 + m0, r))
        sol = solve_conic(prob)
        U = sol.u.reshape(data.D, data.m)
        X = self._rollout(data, x0, U)
        value = self._objective(data, X, U)
        return ControlPolicy(data.tree, U, X, value, sol.status, sol.kkt_residual, sol.iterations,
                             "convex-polished" if sol.polished else "convex")

    # -- nonlinear path: sequential convexification ---------------------------

    def _sensitivities(self, data, X, U):
        """``dX[node] / dU`` under the nonlinear dynamics (chain rule on the tree)."""
        sys, tree = self.spec.system, data.tree
        n, m, nv = data.n, data.m, data.D * data.m
        J = np.zeros((tree.num_nodes, n, nv))
        for node in range(1, tree.num_nodes):
            p = int(tree.parent[node])
            first = tree.children[p][0]
            if node != first:
                J[node] = J[first]
                continue
            A, B = sys.jacobians(X[p], U[p], int(tree.mode[p]))
            J[node] = np.asarray(A) @ J[p]
            J[node][:, p * m : (p + 1) * m] += np.asarray(B).reshape(n, m)
        return J

    def _merit(self, data, x0, U, mu):
        X = self._rollout(data, x0, U)
        sys, tree = self.spec.system, data.tree
        viol = 0.0
        for node in range(data.D):
            Y = sys.constraints[int(tree.mode[node])]
            z = np.concatenate([X[node], U[node]])
            viol += np.maximum(Y.H @ z - Y.h, 0.0).sum()
        eq, exc = self._terminal_residuals(data, X)
        viol += sum(np.abs(e).sum() for e in eq) + sum(max(e, 0.0) for e in exc)
        return self._objective(data, X, U) + mu * viol, X

    def _initial_guess(self, data):
        tree = data.tree
        us = self.spec.profile.u_s
        return np.array([us[int(tree.mode[node])] for node in range(data.D)])

    def _solve_scp(self, data, x0, warm_start) -> ControlPolicy:
        spec, sys, tree = self.spec, self.spec.system, data.tree
        n, m, D = data.n, data.m, data.D
        nv = D * m
        U = self._initial_guess(data) if warm_start is None else np.array(warm_start, dtype=float).reshape(D, m)
        mu = 1e4
        radius = 1.0
        phi, X = self._merit(data, x0, U, mu)
        last_step = np.inf
        for it in range(1, spec.max_scp_iterations + 1):
            J = self._sensitivities(data, X, U)
            Hq = np.zeros((nv, nv))
            gq = np.zeros(nv)
            for node in range(D):
                fn = self.stage_fns[int(tree.mode[node])]
                z = np.concatenate([X[node], U[node]])
                _, g, Hz = fn.derivs(z)
                Eu = np.zeros((m, nv))
                Eu[:, node * m : (node + 1) * m] = np.eye(m)
                T = np.vstack([J[node], Eu])
                Hq += tree.prob[node] * T.T @ _psd_part(Hz) @ T
                gq += tree.prob[node] * T.T @ g
            if self.terminal_fns is not None:
                for leaf in tree.nodes_at(tree.horizon):
                    _, g, Hz = self.terminal_fns[int(tree.mode[leaf])].derivs(X[leaf])
                    Hq += tree.prob[leaf] * J[leaf].T @ _psd_part(Hz) @ J[leaf]
                    gq += tree.prob[leaf] * J[leaf].T @ g
            Hq = 0.5 * (Hq + Hq.T) + 1e-9 * np.eye(nv)

            # linearized constraints with l1 elastic slacks
            G_rows, g_rows = [], []
            for node in range(D):
                Y = sys.constraints[int(tree.mode[node])]
                Eu = np.zeros((m, nv))
                Eu[:, node * m : (node + 1) * m] = np.eye(m)
                G_rows.append(Y.Hx @ J[node] + Y.Hu @ Eu)
                g_rows.append(Y.h - Y.H @ np.concatenate([X[node], U[node]]))
            Gl = np.vstack(G_rows)
            gl = np.concatenate(g_rows)
            n_in = Gl.shape[0]
            eq_rows, eq_rhs, cones = [], [], []
            if spec.formulation is Formulation.TERMINAL_EQUALITY:
                for leaf, pm in _eq_nodes(tree):
                    eq_rows.append(J[leaf])
                    eq_rhs.append(self._targets[pm] - X[leaf])
            else:
                xs = spec.ingredients.x_s
                for leaf in tree.nodes_at(tree.horizon):
                    Lt, r = self._ellipsoids[int(tree.mode[leaf])]
                    cones.append((Lt @ J[leaf], Lt @ (X[leaf] - xs), r))
            Aeq = np.vstack(eq_rows) if eq_rows else np.zeros((0, nv))
            beq = np.concatenate(eq_rhs) if eq_rhs else np.zeros(0)
            n_eq = Aeq.shape[0]
            n_cone = len(cones)
            # variables: d (nv), s_in (n_in), s_eq+ (n_eq), s_eq- (n_eq), s_cone (n_cone)
            ns = n_in + 2 * n_eq + n_cone
            nt = nv + ns
            Hs = np.zeros((nt, nt))
            Hs[:nv, :nv] = Hq
            fs = np.concatenate([gq, mu * np.ones(ns)])
            G = [np.hstack([Gl, -np.eye(n_in), np.zeros((n_in, ns - n_in))])]
            g = [gl]
            G.append(np.hstack([np.zeros((ns, nv)), -np.eye(ns)]))
            g.append(np.zeros(ns))
            G.append(np.hstack([np.eye(nv), np.zeros((nv, ns))]))
            g.append(np.full(nv, radius))
            G.append(np.hstack([-np.eye(nv), np.zeros((nv, ns))]))
            g.append(np.full(nv, radius))
            prob = ConicProblem(Hs, fs, G=np.vstack(G), g=np.concatenate(g))
            if n_eq:
                Z = np.zeros((n_eq, ns))
                Z[:, n_in : n_in + n_eq] = -np.eye(n_eq)
                Z[:, n_in + n_eq : n_in + 2 * n_eq] = np.eye(n_eq)
                prob.A_eq = np.hstack([Aeq, Z])
                prob.b_eq = beq
            for k, (M, m0, r) in enumerate(cones):
                # ||M d + m0|| <= r + s_k, written as an SOC in (d, s)
                Mk = np.hstack([M, np.zeros((M.shape[0], ns))])
                sk = np.zeros((1, nt))
                sk[0, nv + n_in + 2 * n_eq + k] = 1.0
                prob.cones.append((Mk, m0, r, sk))
            sub = _solve_subproblem(prob)
            d = sub[:nv].reshape(D, m)
            model_obj = 0.5 * sub @ Hs @ sub + fs @ sub
            # the model at d = 0 equals the merit, so the predicted decrease is
            # the current penalty minus the model's objective-plus-penalty change
            predicted = (phi - self._objective(data, X, U)) - model_obj
            step = float(np.abs(d).max())
            U_try = U + d
            phi_try, X_try = self._merit(data, x0, U_try, mu)
            actual = phi - phi_try
            ratio = actual / predicted if predicted > 1e-14 else (1.0 if actual >= -1e-12 else -1.0)
            if ratio < 0.1 and n_eq:
                # second-order correction: restore the terminal equalities to
                # first order around the trial point (avoids the Maratos effect)
                res = np.concatenate([self._targets[pm] - X_try[leaf] for leaf, pm in _eq_nodes(tree)])
                corr = np.linalg.lstsq(Aeq, res, rcond=None)[0].reshape(D, m)
                U_soc = U_try + corr
                phi_soc, X_soc = self._merit(data, x0, U_soc, mu)
                ratio_soc = (phi - phi_soc) / predicted if predicted > 1e-14 else -1.0
                if ratio_soc >= 0.1:
                    U_try, X_try, phi_try, ratio = U_soc, X_soc, phi_soc, ratio_soc
            if ratio >= 0.1:
                U, X, phi = U_try, X_try, phi_try
                if ratio > 0.75 and step >= 0.99 * radius:
                    radius = min(2.0 * radius, 1e3)
            else:
                radius *= 0.5
            last_step = step
            small_model = predicted <= 1e-12 * (1.0 + abs(phi))
            if step <= STATIONARITY_TOL or radius < 1e-10 or small_model:
                viol = self._violation(data, X, U)
                if viol > 1e-6:
                    raise InfeasibleError(
                        f"sequential convexification stalled with constraint violation {viol:.2e}",
                        status="LocallyInfeasible", last_iterate=U,
                    )
                value = self._objective(data, X, U)
                return ControlPolicy(tree, U, X, value, "Solved", step, it, "scp")
        viol = self._violation(data, X, U)
        raise NoConvergenceError(
            f"no stationarity after {spec.max_scp_iterations} iterations (last step {last_step:.2e}, "
            f"violation {viol:.2e})", status="NoConvergence", last_iterate=U,
        )


def _psd_part(Hm):
    Hm = 0.5 * (Hm + Hm.T)
    w, V = np.linalg.eigh(Hm)
    return (V * np.maximum(w, 0.0)) @ V.T


def _solve_subproblem(prob) -> np.ndarray:
    """Solve the SCP subproblem; cones carry an extra slack row ``s`` on the radius."""
    import clarabel
    from scipy import sparse

    n = prob.f.size
    blocks, rhs, cones = [], [], []
    if prob.A_eq is not None:
        blocks.append(prob.A_eq)
        rhs.append(prob.b_eq)
        cones.append(clarabel.ZeroConeT(prob.A_eq.shape[0]))
    blocks.append(prob.G)
    rhs.append(prob.g)
    cones.append(clarabel.NonnegativeConeT(prob.G.shape[0]))
    for M, m0, r, srow in prob.cones:
        blocks.append(np.vstack([-srow, -M]))
        rhs.append(np.concatenate([[r], m0]))
        cones.append(clarabel.SecondOrderConeT(M.shape[0] + 1))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = settings.tol_gap_rel = settings.tol_feas = 1e-10
    solver = clarabel.DefaultSolver(
        sparse.csc_matrix(np.triu(prob.H)), prob.f, sparse.csc_matrix(np.vstack(blocks)),
        np.concatenate(rhs), cones, settings,
    )
    sol = solver.solve()
    x = np.array(sol.x)
    if not np.isfinite(x).all() or "Infeasible" in str(sol.status):
        raise NoConvergenceError(f"convex subproblem failed ({sol.status})", status=str(sol.status))
    return x


# ----------------------------------------------------------------------------
# receding horizon helpers


def solve(spec: OcpSpec, x, theta, solver: OcpSolver | None = None) -> ControlPolicy:
    return (solver or OcpSolver(spec)).solve(x, theta)


def receding_horizon_control(spec: OcpSpec, x, theta, solver: OcpSolver | None = None) -> np.ndarray:
    return solve(spec, x, theta, solver).first_input


def rotated_value_offset(spec: OcpSpec, x, theta) -> float:
    """``V_rot* - V*`` predicted in closed form (independent of the policy)."""
    if spec.storage is None:
        raise ValueError("offset needs a storage function")
    lam = spec.storage(x, theta) - spec.lambda_s
    if spec.formulation is Formulation.TERMINAL_EQUALITY:
        return lam
    ing = spec.ingredients
    return lam - spec.horizon * spec.ell_s - ing.terminal_cost(ing.x_s, theta)


def shift_policy(spec: OcpSpec, policy: ControlPolicy, new_tree: ScenarioTree) -> np.ndarray:
    """Candidate policy for the successor problem built from ``policy``.

    A new-tree decision node whose mode path is ``(t1, ..., tk)`` reuses the
    input of the old-tree node ``(t0, t1, ..., tk)``; stage N-1 of the new
    tree has no old counterpart with an input, so it gets the bridging input
    (terminal equality) or the terminal law (terminal set).
    """
    old = policy.tree
    N = old.horizon
    t0 = old.root_mode
    prof = spec.profile
    out = np.empty((new_tree.num_decision_nodes, policy.inputs.shape[1]))
    for node in range(new_tree.num_decision_nodes):
        path = [t0] + [int(new_tree.mode[i]) for i in new_tree.path_to(node)]
        old_node = old.find(path)
        if new_tree.stage[node] < N - 1:
            out[node] = policy.inputs[old_node]
            continue
        leaf_mode = path[-1]
        if spec.formulation is Formulation.TERMINAL_EQUALITY:
            parent_mode = path[-2]
            out[node] = prof.bridging[prof.bet[parent_mode], leaf_mode]
        else:
            out[node] = spec.ingredients.kappa_f(policy.states[old_node], leaf_mode)
    return out


@dataclass(frozen=True)
class DriftSample:
    """One-step expected change of the optimal value at ``(x, theta)``.

    ``bound`` is the right-hand side the drift must not exceed: ``l_N(theta)
    - l`` (terminal equality), ``l_s - l`` (terminal set) or ``-rho`` (rotated).
    """

    drift: float
    stage_cost: float
    bound: float
    value: float
    successor_values: tuple

    @property
    def slack(self) -> float:
        return self.bound - self.drift


def lyapunov_drift_sample(spec: OcpSpec, x, theta, solver: OcpSolver | None = None,
                          ell_N=None) -> DriftSample:
    """Solve at ``(x, theta)`` and at every successor mode; return the drift.

    ``ell_N`` (per-mode array) is required for the unrotated terminal-equality
    bound; it is computed from the profile when omitted.
    """
    from .simulator import ell_N as _ell_N

    solver = solver or OcpSolver(spec)
    sys = spec.system
    pol = solver.solve(x, theta)
    u = pol.first_input
    x_next = sys.step(x, u, theta)
    P = sys.chain.transition[theta]
    succ = []
    for j in sys.chain.cover(theta):
        try:
            succ.append(solver.solve(x_next, j).value)
        except SolverError as exc:
            raise InfeasibleError(
                f"successor problem infeasible at mode {j}: recursive feasibility violated",
                status="SuccessorInfeasible", last_iterate=x_next,
            ) from exc
    drift = sum(P[j] * v for j, v in zip(sys.chain.cover(theta), succ)) - pol.value
    cost = sys.stage_cost(x, u, theta)
    if spec.rotated:
        bound = -spec.storage.rho[theta](np.asarray(x, dtype=float))
    elif spec.formulation is Formulation.TERMINAL_EQUALITY:
        ell = _ell_N(sys.chain, spec.profile, spec.horizon, theta) if ell_N is None else ell_N[theta]
        bound = ell - cost
    else:
        bound = spec.ell_s - cost
    return DriftSample(float(drift), float(cost), float(bound), pol.value, tuple(succ))
