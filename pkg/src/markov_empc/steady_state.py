"""Optimal steady states per mode, bridging inputs between them, and the
common-equilibrium test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from ._conic import ConicProblem, solve_conic
from .errors import ControllabilityError, InfeasibleError, SolverError, SteadyStateError
from .system import LinearDynamics, QuadraticCost, SwitchingSystem

RESIDUAL_TOL = 1e-8
COMMON_TOL = 1e-8
TIE_TOL = 1e-9
DEFAULT_STARTS = 32


@dataclass(frozen=True, eq=False)
class SteadyStateProfile:
    """Per-mode optimal steady states and the bridging table.

    ``bridging[i, j]`` is the input applied in mode ``j`` at ``x_s[i]`` that
    lands on ``x_s[bet(j)]``; it is NaN for pairs that are never used and
    admit no such input. ``bridge_cost[i, j]`` is the stage cost of that move.
    """

    x_s: np.ndarray
    u_s: np.ndarray
    ell_s: np.ndarray
    bridging: np.ndarray
    bridge_cost: np.ndarray
    bet: tuple

    @property
    def num_modes(self):
        return self.ell_s.size

    @property
    def common_equilibrium(self) -> bool:
        return bool(np.ptp(self.x_s, axis=0).max() <= COMMON_TOL and np.ptp(self.ell_s) <= COMMON_TOL)

    @property
    def common_state(self) -> np.ndarray:
        if not self.common_equilibrium:
            raise SteadyStateError("steady states are mode dependent")
        return self.x_s[0]

    @property
    def common_cost(self) -> float:
        if not self.common_equilibrium:
            raise SteadyStateError("steady states are mode dependent")
        return float(self.ell_s[0])


def _is_lq(sys: SwitchingSystem, theta: int) -> bool:
    f, c = sys.dynamics[theta], sys.costs[theta]
    if type(f) is not LinearDynamics or not isinstance(c, QuadraticCost):
        return False
    return np.linalg.eigvalsh(c.W).min() >= -1e-12


def solve_steady_state(sys: SwitchingSystem, theta: int, starts: int = DEFAULT_STARTS, seed: int = 0):
    """Minimize ``l_theta`` over fixed points of ``f_theta`` inside ``Y_theta``.

    Returns ``(x_s, u_s, l_s)``.
    """
    if _is_lq(sys, theta):
        x, u = _steady_state_qp(sys, theta)
    else:
        x, u = _steady_state_multistart(sys, theta, starts, seed)
    res = np.abs(sys.step(x, u, theta) - x).max()
    if res > RESIDUAL_TOL:
        raise SteadyStateError(f"fixed-point residual {res:.2e} exceeds {RESIDUAL_TOL}", theta)
    return x, u, sys.stage_cost(x, u, theta)


def _steady_state_qp(sys, theta):
    n, m = sys.state_dim, sys.input_dim
    f, c, Y = sys.dynamics[theta], sys.costs[theta], sys.constraints[theta]
    prob = ConicProblem(
        H=2.0 * c.W, f=c.w.copy(),
        A_eq=np.hstack([f.A - np.eye(n), f.B]), b_eq=-f.w,
        G=Y.H, g=Y.h,
    )
    try:
        sol = solve_conic(prob)
    except InfeasibleError as exc:
        raise SteadyStateError(f"mode {theta}: no fixed point inside the constraint set", theta) from exc
    except SolverError as exc:
        raise SteadyStateError(f"mode {theta}: steady-state program failed ({exc})", theta) from exc
    return sol.u[:n], sol.u[n:]


def _newton_project(sys, theta, z, iters=20):
    """Minimum-norm Gauss-Newton correction onto the fixed-point manifold."""
    n = sys.state_dim
    for _ in range(iters):
        x, u = z[:n], z[n:]
        r = sys.step(x, u, theta) - x
        if np.abs(r).max() <= 1e-13:
            break
        A, B = sys.jacobians(x, u, theta)
        J = np.hstack([np.asarray(A) - np.eye(n), np.asarray(B).reshape(n, -1)])
        z = z - np.linalg.lstsq(J, r, rcond=None)[0]
    return z


def _steady_state_multistart(sys, theta, starts, seed):
    n = sys.state_dim
    Y = sys.constraints[theta]
    sampler = qmc.LatinHypercube(d=Y.dim, seed=seed)
    pts = qmc.scale(sampler.random(starts), Y.lower, Y.upper) if np.all(Y.upper > Y.lower) else np.tile(
        Y.interior_point, (starts, 1)
    )
    cons = [
        {"type": "eq", "fun": lambda z: sys.step(z[:n], z[n:], theta) - z[:n]},
        {"type": "ineq", "fun": lambda z: Y.h - Y.H @ z, "jac": lambda z: -Y.H},
    ]
    candidates = []
    for z0 in pts:
        try:
            r = minimize(lambda z: sys.stage_cost(z[:n], z[n:], theta), z0, method="SLSQP",
                         constraints=cons, options={"ftol": 1e-14, "maxiter": 500})
        except (ValueError, FloatingPointError):
            continue
        z = _newton_project(sys, theta, r.x)
        if np.abs(sys.step(z[:n], z[n:], theta) - z[:n]).max() > RESIDUAL_TOL:
            continue
        if not Y.contains(z[:n], z[n:], tol=1e-9):
            continue
        candidates.append((sys.stage_cost(z[:n], z[n:], theta), z))
    if not candidates:
        raise SteadyStateError(f"mode {theta}: no feasible fixed point found from {starts} starts", theta)
    best = min(v for v, _ in candidates)
    near = [z for v, z in candidates if v <= best + TIE_TOL * (1.0 + abs(best))]
    z = min(near, key=lambda z: tuple(np.round(z, 9)))
    return z[:n], z[n:]


def solve_bridging_law(sys: SwitchingSystem, profile_or_states, i: int, j: int):
    """Input closest to ``u_s[j]`` moving ``x_s[i]`` to ``x_s[bet(j)]`` in mode ``j``.

    ``profile_or_states`` is a :class:`SteadyStateProfile` or a tuple
    ``(x_s, u_s)`` of per-mode arrays.
    """
    if isinstance(profile_or_states, SteadyStateProfile):
        xs, us = profile_or_states.x_s, profile_or_states.u_s
    else:
        xs, us = (np.asarray(a, dtype=float) for a in profile_or_states)
    target = xs[sys.chain.bet(j)]
    x0 = xs[i]
    f, Y = sys.dynamics[j], sys.constraints[j]
    m = sys.input_dim
    if type(f) is LinearDynamics:
        prob = ConicProblem(
            H=2.0 * np.eye(m), f=-2.0 * us[j],
            A_eq=f.B, b_eq=target - f.A @ x0 - f.w,
            G=Y.Hu, g=Y.h - Y.Hx @ x0,
        )
        try:
            u = solve_conic(prob).u
        except SolverError as exc:
            raise ControllabilityError(
                f"no admissible input moves x_s[{i}] to x_s[{sys.chain.bet(j)}] in mode {j}", (i, j)
            ) from exc
    else:
        cons = [
            {"type": "eq", "fun": lambda v: sys.step(x0, v, j) - target},
            {"type": "ineq", "fun": lambda v: Y.h - Y.Hx @ x0 - Y.Hu @ v, "jac": lambda v: -Y.Hu},
        ]
        r = minimize(lambda v: float((v - us[j]) @ (v - us[j])), us[j], method="SLSQP",
                     constraints=cons, options={"ftol": 1e-14, "maxiter": 500})
        u = r.x
    res = np.abs(sys.step(x0, u, j) - target).max()
    if res > RESIDUAL_TOL or not Y.contains(x0, u, tol=1e-9):
        raise ControllabilityError(
            f"bridging input for pair ({i}, {j}) misses the target (residual {res:.2e})", (i, j)
        )
    return u


def needed_pairs(chain) -> set:
    """Pairs ``(bet(a), b)`` with ``b`` in ``cover(a)``; only these enter the
    terminal-equality problem and the performance bound."""
    return {(chain.bet(a), b) for a in range(chain.num_modes) for b in chain.cover(a)}


def compute_profile(sys: SwitchingSystem, starts: int = DEFAULT_STARTS, seed: int = 0,
                    require_bridging: bool = True) -> SteadyStateProfile:
    nu, m = sys.num_modes, sys.input_dim
    sols = [solve_steady_state(sys, t, starts, seed) for t in range(nu)]
    xs = np.array([s[0] for s in sols])
    us = np.array([s[1] for s in sols])
    ell = np.array([s[2] for s in sols])
    bridging = np.full((nu, nu, m), np.nan)
    cost = np.full((nu, nu), np.nan)
    needed = needed_pairs(sys.chain)
    for i in range(nu):
        for j in range(nu):
            try:
                u = solve_bridging_law(sys, (xs, us), i, j)
            except ControllabilityError:
                if require_bridging and (i, j) in needed:
                    raise
                continue
            bridging[i, j] = u
            cost[i, j] = sys.stage_cost(xs[i], u, j)
    for arr in (xs, us, ell, bridging, cost):
        arr.setflags(write=False)
    bet = tuple(sys.chain.bet(i) for i in range(nu))
    return SteadyStateProfile(xs, us, ell, bridging, cost, bet)
