"""Terminal ingredients from the linearization at the common equilibrium.

Pipeline (:func:`design_terminal_ingredients`):

1. linearize every mode at ``(x_s, u_s^i)``;
2. synthesize gains ``K_i`` and ellipsoid shapes ``E_i`` from the S-lemma
   LMI at fixed ``tau`` (line search over ``tau``), iterating the
   linearization-error constant ``gamma_i`` to a fixed point;
3. solve the coupled Lyapunov equations for ``P^I``, ``P^beta`` and the
   linear terms ``p``;
4. pick ``delta`` and ``alpha`` so that the linearization error in the
   expected terminal-cost decrease is dominated by ``alpha/2 |x|^2``;
5. shrink the common ellipsoid level so the sets sit inside the ball of
   radius ``delta`` and inside the constraint sets;
6. certify everything by sampling and eigenvalue checks.

All quantities live in shifted coordinates ``z = x - x_s``:
``V_f(x, i) = 1/2 z'P_i^f z + p_i'z``, ``kappa_f(x, i) = u_s^i + K_i z`` and
``X_i^f = {x : z'E_i z <= c}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AllTauInfeasibleError, DesignError
from .markov_chain import MarkovChain
from .sdp import LmiProblem, min_eigenvalue, solve_feasibility
from .steady_state import SteadyStateProfile
from .system import (
    Certificate,
    Linearization,
    QuadraticCost,
    StorageFunction,
    SwitchingSystem,
    estimate_smoothness,
    linearize,
    storage_drift,
)

LYAPUNOV_TOL = 1e-8
DELTA_SAFETY = 0.9
ALPHA_SAFETY = 1.05
ALPHA_FLOOR = 1e-6
LEVEL_SAFETY = 0.999
DEFAULT_BUDGET = 0.5
TAU_GRID = (1e-4, 1e2, 32)
GAMMA_ROUNDS = 10
GAMMA_REL_TOL = 0.05


class MeanSquareUnstableError(DesignError):
    """The closed-loop jump linear system is not mean-square stable."""


# ----------------------------------------------------------------------------
# coupled Lyapunov equations


def expected_next(transition, values, i):
    """``E_i(X) = sum_j p_ij X_j``."""
    P = np.asarray(transition)
    return np.tensordot(P[i], np.asarray(values), axes=1)


def second_moment_radius(closed_loop, transition) -> float:
    """Spectral radius of ``X -> (Gamma_i' (sum_j p_ij X_j) Gamma_i)_i``.

    The closed loop ``x+ = Gamma_theta x`` is mean-square stable iff it is < 1.
    """
    T = _lyapunov_operator(closed_loop, transition)
    return float(np.abs(np.linalg.eigvals(T)).max())


def _lyapunov_operator(closed_loop, transition):
    nu = len(closed_loop)
    n = closed_loop[0].shape[0]
    P = np.asarray(transition)
    T = np.zeros((nu * n * n, nu * n * n))
    for i in range(nu):
        kron = np.kron(closed_loop[i].T, closed_loop[i].T)
        for j in range(nu):
            if P[i, j] > 0:
                T[i * n * n : (i + 1) * n * n, j * n * n : (j + 1) * n * n] = P[i, j] * kron
    return T


def coupled_lyapunov(closed_loop, transition, Q=None, q=None):
    """Solve ``P_i = Q_i + G_i' E_i(P) G_i`` and ``p_i = q_i + G_i' E_i(p)``.

    The stacked linear systems are solved directly (they are small) and
    refined by one step of iterative refinement. Returns ``(P, p, residual)``
    where ``p`` is None when ``q`` is not given.
    """
    G = [np.atleast_2d(np.asarray(g, dtype=float)) for g in closed_loop]
    nu, n = len(G), G[0].shape[0]
    trans = np.asarray(transition.transition if isinstance(transition, MarkovChain) else transition, dtype=float)
    rho = second_moment_radius(G, trans)
    if rho >= 1.0:
        raise MeanSquareUnstableError(
            f"closed loop is not mean-square stable (second-moment spectral radius {rho:.6f})",
            {"spectral_radius": rho},
        )
    P = None
    residual = 0.0
    if Q is not None:
        Qs = np.array([np.atleast_2d(np.asarray(Qi, dtype=float)) for Qi in Q])
        T = _lyapunov_operator(G, trans)
        M = np.eye(T.shape[0]) - T
        rhs = np.concatenate([Qi.T.ravel() for Qi in Qs])  # column-major vec
        sol = np.linalg.solve(M, rhs)
        sol += np.linalg.solve(M, rhs - M @ sol)
        P = np.array([sol[i * n * n : (i + 1) * n * n].reshape(n, n).T for i in range(nu)])
        P = 0.5 * (P + P.transpose(0, 2, 1))
        residual = max(residual, lyapunov_residual(G, trans, P, Qs))
    p = None
    if q is not None:
        qs = np.array([np.atleast_1d(np.asarray(qi, dtype=float)) for qi in q])
        T1 = np.zeros((nu * n, nu * n))
        for i in range(nu):
            for j in range(nu):
                T1[i * n : (i + 1) * n, j * n : (j + 1) * n] = trans[i, j] * G[i].T
        M1 = np.eye(nu * n) - T1
        sol = np.linalg.solve(M1, qs.ravel())
        sol += np.linalg.solve(M1, qs.ravel() - M1 @ sol)
        p = sol.reshape(nu, n)
        residual = max(residual, linear_residual(G, trans, p, qs))
    if residual > LYAPUNOV_TOL:
        raise DesignError(f"coupled Lyapunov residual {residual:.2e} exceeds {LYAPUNOV_TOL}",
                          {"residual": residual})
    return P, p, residual


def lyapunov_residual(closed_loop, transition, P, Q) -> float:
    trans = np.asarray(transition)
    out = 0.0
    for i, G in enumerate(closed_loop):
        R = P[i] - Q[i] - G.T @ expected_next(trans, P, i) @ G
        out = max(out, float(np.abs(R).max()))
    return out


def linear_residual(closed_loop, transition, p, q) -> float:
    trans = np.asarray(transition)
    out = 0.0
    for i, G in enumerate(closed_loop):
        out = max(out, float(np.abs(p[i] - q[i] - G.T @ expected_next(trans, p, i)).max()))
    return out


def quadratic_upper_bound(beta_l, alpha, q):
    """``(Q*_theta, q_theta)`` with ``Q* = (alpha + beta_l) I``."""
    q = [np.atleast_1d(np.asarray(v, dtype=float)) for v in q]
    Qs = [(alpha + float(b)) * np.eye(v.size) for b, v in zip(np.atleast_1d(beta_l), q)]
    return Qs, q


# ----------------------------------------------------------------------------
# LMI synthesis


def decrease_lmi(E_i, E_j, G, gamma, tau) -> np.ndarray:
    """S-lemma form of the one-step ellipsoid decrease.

    ``[z; d]' M [z; d] >= 0`` for all ``|d|^2 <= gamma z'E_i z`` guarantees
    ``(G z + d)' E_j (G z + d) <= z' E_i z``.
    """
    n = G.shape[0]
    M = np.block([
        [E_i - G.T @ E_j @ G - tau * gamma * E_i, -G.T @ E_j],
        [-E_j @ G, tau * np.eye(n) - E_j],
    ])
    return M


def stacked_decrease_lmi(E_i, E_j, G, gamma, tau) -> np.ndarray:
    """``diag(E_i, tau I) - ([G I]' E_j [G I] + diag(tau gamma E_i, 0))``."""
    n = G.shape[0]
    GI = np.hstack([G, np.eye(n)])
    D = np.zeros((2 * n, 2 * n))
    D[:n, :n] = E_i * (1.0 - tau * gamma)
    D[n:, n:] = tau * np.eye(n)
    return D - GI.T @ E_j @ GI


def schur_lmi(E_i, E_j, G, gamma, tau) -> np.ndarray:
    """Four-block Schur form in the ellipsoid matrices (needs gamma, tau > 0)."""
    n = G.shape[0]
    Z = np.zeros((n, n))
    I = np.eye(n)
    return np.block([
        [E_i, Z, E_i, G.T @ E_j],
        [Z, tau * I, Z, E_j],
        [E_i, Z, E_i / (gamma * tau), Z],
        [E_j @ G, E_j, Z, E_j],
    ])


def synthesis_lmi(Z_i, Z_j, A, B, Y_i, gamma, tau) -> np.ndarray:
    """Congruence-transformed Schur form, affine in ``(Z, Y)`` at fixed tau.

    With ``gamma = 0`` the disturbance blocks vanish and the condition reduces
    to ``[[Z_i, Z_i G'], [G Z_i, Z_j]] >= 0``.
    """
    n = A.shape[0]
    ZGt = Z_i @ A.T + Y_i.T @ B.T
    if gamma <= 0:
        return np.block([[Z_i, ZGt], [ZGt.T, Z_j]])
    Zn = np.zeros((n, n))
    I = np.eye(n)
    return np.block([
        [Z_i, Zn, tau * Z_i, ZGt],
        [Zn, tau * I, Zn, I],
        [tau * Z_i, Zn, (tau / gamma) * Z_i, Zn],
        [ZGt.T, I, Zn, Z_j],
    ])


def ball_lmi(Z_i, delta) -> np.ndarray:
    """``{z'Z^-1 z <= 1}`` inside the ball of radius ``delta`` iff ``delta^2 I - Z >= 0``."""
    return delta**2 * np.eye(Z_i.shape[0]) - Z_i


@dataclass(frozen=True)
class SynthesisResult:
    K: np.ndarray
    E: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    tau: float
    margin: float
    per_tau_margins: tuple


def _lmi_problem(lin: Linearization, chain: MarkovChain, gammas, delta_cap, tau, eps):
    nu, n = len(lin.A), lin.A[0].shape[0]
    m = lin.B[0].shape[1]
    prob = LmiProblem()
    for i in range(nu):
        prob.add_symmetric(f"Z{i}", n)
        prob.add_matrix(f"Y{i}", m, n)
    for i in range(nu):
        prob.add_constraint(lambda v, i=i: v[f"Z{i}"], eps, f"Z{i}>0")
        prob.add_constraint(lambda v, i=i: ball_lmi(v[f"Z{i}"], delta_cap), 0.0, f"ball{i}")
        for j in chain.cover(i):
            prob.add_constraint(
                lambda v, i=i, j=j: synthesis_lmi(v[f"Z{i}"], v[f"Z{j}"], lin.A[i], lin.B[i], v[f"Y{i}"],
                                                  gammas[i], tau),
                0.0, f"decrease{i}{j}",
            )
    return prob


def synthesize_gains_and_ellipsoids(lin: Linearization, chain: MarkovChain, gammas, delta_cap: float,
                                    tau_grid=TAU_GRID, refine_steps: int = 20) -> SynthesisResult:
    """Line search over tau of the margin-maximizing LMI; returns the best tau.

    The grid is scaled by ``1/delta_cap^2`` because the LMI is jointly
    homogeneous in ``(E, tau)`` and ``E >= I/delta_cap^2``.
    """
    gammas = np.asarray(gammas, dtype=float)
    eps = 1e-9 * delta_cap**2
    nu, n = len(lin.A), lin.A[0].shape[0]

    def run(tau, tol=1e-8):
        return solve_feasibility(_lmi_problem(lin, chain, gammas, delta_cap, tau, eps), tol=tol)

    if not (gammas > 0).any():
        taus = [0.0]
        results = [run(0.0)]
    else:
        lo, hi, count = tau_grid
        taus = list(np.geomspace(lo, hi, int(count)) / delta_cap**2)
        results = [run(t) for t in taus]
    margins = [r.margin for r in results]
    best = int(np.argmax(margins))
    tau, res = taus[best], results[best]
    if len(taus) > 1:
        a = math.log(taus[max(best - 1, 0)])
        b = math.log(taus[min(best + 1, len(taus) - 1)])
        cache = {}

        def score(s):
            if s not in cache:
                cache[s] = run(math.exp(s))
            return cache[s].margin

        g = (math.sqrt(5) - 1) / 2
        c, d = b - g * (b - a), a + g * (b - a)
        for _ in range(refine_steps):
            if score(c) > score(d):
                b, d = d, c
                c = b - g * (b - a)
            else:
                a, c = c, d
                d = a + g * (b - a)
        s_best = max(cache, key=lambda s: cache[s].margin)
        if cache[s_best].margin > res.margin:
            tau, res = math.exp(s_best), cache[s_best]
    res = run(tau, tol=1e-11)
    if not res.feasible:
        raise AllTauInfeasibleError(list(zip(taus, margins)))
    Z = np.array([res.values[f"Z{i}"] for i in range(nu)])
    Y = np.array([res.values[f"Y{i}"] for i in range(nu)])
    E = np.array([np.linalg.inv(Zi) for Zi in Z])
    E = 0.5 * (E + E.transpose(0, 2, 1))
    K = np.array([Y[i] @ E[i] for i in range(nu)])
    return SynthesisResult(K, E, Z, Y, float(tau), float(res.margin), tuple(zip(taus, margins)))


# ----------------------------------------------------------------------------
# constants


def linearization_error_gamma(beta_f, E, c=1.0, delta=None) -> float:
    """``gamma`` with ``|e|^2 <= gamma z'E z`` on ``{z'E z <= c}`` (intersected with the delta-ball).

    Uses ``|e| <= beta_f/2 |z|^2 <= beta_f r/2 |z|`` with ``r`` the radius of the
    set and ``|z|^2 <= z'E z / lambda_min(E)``.
    """
    lam = float(np.linalg.eigvalsh(np.atleast_2d(E))[0])
    r = math.sqrt(c / lam)
    if delta is not None:
        r = min(r, delta)
    return (beta_f * r / 2.0) ** 2 / lam


def _positive_root(a, b, budget):
    if a <= 0 and b <= 0:
        return math.inf
    if a <= 0:
        return budget / b
    return (-b + math.sqrt(b * b + 4 * a * budget)) / (2 * a)


def select_alpha_delta(closed_loop, transition, P_I, P_beta, p, beta_f, delta_cap=None,
                       budget: float = DEFAULT_BUDGET):
    """``(alpha, delta)`` making the linearization error at most ``alpha/2 |z|^2`` on the delta-ball.

    With ``a = beta^2/8 |E(P^I)|`` and ``b = beta/2 |G| |E(P^I)|`` the ball
    radius must satisfy ``a d^2 + b d < budget``; ``alpha`` then has to exceed
    ``(beta^2/8 |E(P^b)| d^2 + beta/2 |G| |E(P^b)| d + beta/2 |E(p)|) / (budget - a d^2 - b d)``.
    The bound needs ``budget = 1/2``; larger budgets are accepted for
    comparison only.
    """
    trans = np.asarray(transition)
    beta_f = np.atleast_1d(np.asarray(beta_f, dtype=float))
    if not (beta_f > 0).any():
        return ALPHA_FLOOR, float(delta_cap) if delta_cap is not None else math.inf
    nu = len(closed_loop)
    coefs = []
    roots = []
    for i in range(nu):
        b_ = beta_f[i]
        nI = np.linalg.norm(expected_next(trans, P_I, i), 2)
        nB = np.linalg.norm(expected_next(trans, P_beta, i), 2)
        np_ = np.linalg.norm(expected_next(trans, p, i)) if p is not None else 0.0
        nG = np.linalg.norm(closed_loop[i], 2)
        a, b = b_**2 / 8 * nI, b_ / 2 * nG * nI
        coefs.append((a, b, b_**2 / 8 * nB, b_ / 2 * nG * nB, b_ / 2 * np_))
        roots.append(_positive_root(a, b, budget))
    delta = DELTA_SAFETY * min(roots)
    if delta_cap is not None:
        delta = min(delta, float(delta_cap))
    ratios = [(c4 * delta**2 + c3 * delta + c2) / (budget - a * delta**2 - b * delta)
              for a, b, c4, c3, c2 in coefs]
    alpha = max(ALPHA_SAFETY * max(ratios), ALPHA_FLOOR)
    return float(alpha), float(delta)


# ----------------------------------------------------------------------------
# ingredients


@dataclass(frozen=True, eq=False)
class TerminalIngredients:
    x_s: np.ndarray
    u_s: np.ndarray
    ell_s: float
    K: np.ndarray
    P_f: np.ndarray
    p: np.ndarray
    E: np.ndarray
    c: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    P_I: np.ndarray
    P_beta: np.ndarray
    alpha: float
    delta: float
    tau: float
    gamma: np.ndarray
    beta_f: np.ndarray
    beta_l: np.ndarray
    A: np.ndarray
    B: np.ndarray
    budget: float = DEFAULT_BUDGET
    smoothness_source: tuple = ()
    certificates: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    @property
    def num_modes(self):
        return self.K.shape[0]

    @property
    def closed_loop(self):
        return tuple(self.A[i] + self.B[i] @ self.K[i] for i in range(self.num_modes))

    def terminal_cost(self, x, theta) -> float:
        z = np.asarray(x, dtype=float) - self.x_s
        return float(0.5 * z @ self.P_f[theta] @ z + self.p[theta] @ z)

    def kappa_f(self, x, theta) -> np.ndarray:
        return self.u_s[theta] + self.K[theta] @ (np.asarray(x, dtype=float) - self.x_s)

    def level_value(self, x, theta) -> float:
        z = np.asarray(x, dtype=float) - self.x_s
        return float(z @ self.E[theta] @ z)

    def contains(self, x, theta, tol=1e-9) -> bool:
        return self.level_value(x, theta) <= self.c[theta] * (1 + tol)

    def replace(self, **changes) -> "TerminalIngredients":
        from dataclasses import replace as _replace

        return _replace(self, **changes)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.certificates)


def _sample_ellipsoid(rng, E, c, count, boundary_fraction=0.8):
    """Points ``z`` with ``z'E z <= c``; a fraction lies on the boundary."""
    n = E.shape[0]
    L = np.linalg.cholesky(E)
    v = rng.normal(size=(count, n))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    radii = np.ones(count)
    k = int(round(boundary_fraction * count))
    radii[k:] = rng.uniform(size=count - k) ** (1.0 / n)
    w = v * radii[:, None] * math.sqrt(c)
    # z = L^-T w gives z'Ez = |w|^2
    return np.linalg.solve(L.T, w.T).T


def _sample_ball(rng, n, radius, count):
    v = rng.normal(size=(count, n))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * (radius * rng.uniform(size=(count, 1)) ** (1.0 / n))


def _shifted_cost(sys, ing, z, i):
    """``l(x_s + z, kappa_f) - l_s``."""
    x = ing.x_s + z
    return sys.stage_cost(x, ing.kappa_f(x, i), i) - sys.stage_cost(ing.x_s, ing.u_s[i], i)


def _q_vectors(sys, ing):
    out = []
    for i in range(ing.num_modes):
        gx, gu = sys.cost_gradient(ing.x_s, ing.u_s[i], i)
        out.append(np.asarray(gx) + ing.K[i].T @ np.asarray(gu))
    return out


def verify_upi(sys: SwitchingSystem, ing: TerminalIngredients, sample_budget: int = 10_000, seed: int = 0):
    """Algebraic S-lemma check plus sampled successor containment.

    Returns ``(algebraic, sampled)`` certificates.
    """
    G = ing.closed_loop
    worst_alg = np.inf
    for i in range(ing.num_modes):
        for j in sys.chain.cover(i):
            M = decrease_lmi(ing.E[i], ing.E[j], G[i], ing.gamma[i], ing.tau) if ing.gamma[i] > 0 else (
                ing.E[i] - G[i].T @ ing.E[j] @ G[i]
            )
            worst_alg = min(worst_alg, min_eigenvalue(M))
    alg = Certificate("upi_algebraic", worst_alg >= -1e-8, -float(worst_alg), 1e-8)

    rng = np.random.default_rng(seed)
    worst, sample = -np.inf, None
    for i in range(ing.num_modes):
        pts = _sample_ellipsoid(rng, ing.E[i], ing.c[i], sample_budget)
        for z in pts:
            x = ing.x_s + z
            x_next = sys.step(x, ing.kappa_f(x, i), i)
            for j in sys.chain.cover(i):
                excess = ing.level_value(x_next, j) / ing.c[j] - 1.0
                if excess > worst:
                    worst, sample = excess, (x.copy(), i, j)
    sampled = Certificate("upi_sampled", worst <= 1e-8, float(worst), 1e-8, sample)
    return alg, sampled


def terminal_decrease_values(sys, ing, x, i):
    """``(LV_f, -l(x, kappa_f) + l_s)`` at ``x`` in mode ``i``."""
    u = ing.kappa_f(x, i)
    x_next = sys.step(x, u, i)
    P = sys.chain.transition[i]
    lv = sum(P[j] * ing.terminal_cost(x_next, j) for j in sys.chain.cover(i)) - ing.terminal_cost(x, i)
    return lv, -sys.stage_cost(x, u, i) + ing.ell_s


def verify_terminal_decrease(sys: SwitchingSystem, ing: TerminalIngredients, sample_budget: int = 10_000,
                             seed: int = 1, storage: StorageFunction | None = None, tol: float = 1e-8):
    """Sampled check of the expected terminal-cost decrease on each ``X_i^f``.

    With a storage function, the rotated form (terminal cost plus storage
    against the rotated stage cost minus ``l_s``) is certified as well.
    """
    rng = np.random.default_rng(seed)
    worst, sample = -np.inf, None
    worst_rot, sample_rot = -np.inf, None
    lam_s = storage.steady_value(ing.x_s) if storage is not None else 0.0
    for i in range(ing.num_modes):
        pts = _sample_ellipsoid(rng, ing.E[i], ing.c[i], sample_budget)
        pts = np.vstack([np.zeros(ing.x_s.size), pts])
        for z in pts:
            x = ing.x_s + z
            lv, rhs = terminal_decrease_values(sys, ing, x, i)
            if lv - rhs > worst:
                worst, sample = lv - rhs, (x.copy(), i)
            if storage is not None:
                u = ing.kappa_f(x, i)
                drift = storage_drift(sys, storage, x, u, i)
                # rotated terminal cost V_f + lambda - V_f(x_s) - lambda_s
                lv_rot = lv + drift
                rot_cost = sys.stage_cost(x, u, i) - ing.ell_s - drift
                if lv_rot + rot_cost > worst_rot:
                    worst_rot, sample_rot = lv_rot + rot_cost, (x.copy(), i)
    out = [Certificate("terminal_decrease", worst <= tol, float(worst), tol, sample)]
    if storage is not None:
        out.append(Certificate("terminal_decrease_rotated", worst_rot <= tol, float(worst_rot), tol, sample_rot))
    return tuple(out)


def verify_linearization_error(sys, ing, sample_budget=10_000, seed=2):
    """``|f_hat(x) - x_s - G z|^2 <= gamma z'E z`` on samples of each ``X_i^f``."""
    rng = np.random.default_rng(seed)
    G = ing.closed_loop
    worst, sample = -np.inf, None
    for i in range(ing.num_modes):
        for z in _sample_ellipsoid(rng, ing.E[i], ing.c[i], sample_budget):
            x = ing.x_s + z
            e = sys.step(x, ing.kappa_f(x, i), i) - ing.x_s - G[i] @ z
            v = float(e @ e - ing.gamma[i] * (z @ ing.E[i] @ z))
            if v > worst:
                worst, sample = v, (x.copy(), i)
    return Certificate("linearization_error", worst <= 1e-10, worst, 1e-10, sample)


def linearization_gap(sys, ing, x, i):
    """Exact ``E[V_f(f_hat(x), j) - V_f(G z, j)]`` (nonlinear minus linear successor)."""
    z = np.asarray(x, dtype=float) - ing.x_s
    G = ing.closed_loop[i]
    x_next = sys.step(x, ing.kappa_f(x, i), i)
    x_lin = ing.x_s + G @ z
    P = sys.chain.transition[i]
    return sum(P[j] * (ing.terminal_cost(x_next, j) - ing.terminal_cost(x_lin, j)) for j in sys.chain.cover(i))


def verify_smoothness_chain(sys, ing, sample_budget=10_000, seed=3):
    """Quadratic upper bound and linearization-gap bound on the delta-ball.

    Returns ``(upper_bound, gap_bound)`` certificates:
    ``l_q - l_bar - alpha/2 |z|^2 >= -1e-9`` and ``gap <= alpha/2 |z|^2 + 1e-9``.
    """
    rng = np.random.default_rng(seed)
    q = _q_vectors(sys, ing)
    n = ing.x_s.size
    worst_q = worst_g = -np.inf
    sq = sg = None
    for i in range(ing.num_modes):
        Qs = (ing.alpha + ing.beta_l[i]) * np.eye(n)
        for z in _sample_ball(rng, n, ing.delta, sample_budget):
            zz = float(z @ z)
            lq = 0.5 * z @ Qs @ z + q[i] @ z
            v = -(lq - _shifted_cost(sys, ing, z, i) - 0.5 * ing.alpha * zz)
            if v > worst_q:
                worst_q, sq = v, (ing.x_s + z, i)
            gap = linearization_gap(sys, ing, ing.x_s + z, i) - 0.5 * ing.alpha * zz
            if gap > worst_g:
                worst_g, sg = gap, (ing.x_s + z, i)
    return (
        Certificate("quadratic_upper_bound", worst_q <= 1e-9, float(worst_q), 1e-9, sq),
        Certificate("linearization_gap", worst_g <= 1e-9, float(worst_g), 1e-9, sg),
    )


def verify_lyapunov_residuals(sys, ing):
    G = ing.closed_loop
    trans = sys.chain.transition
    nu, n = ing.num_modes, ing.x_s.size
    r_I = lyapunov_residual(G, trans, ing.P_I, [np.eye(n)] * nu)
    r_b = lyapunov_residual(G, trans, ing.P_beta, [b * np.eye(n) for b in ing.beta_l])
    q = _q_vectors(sys, ing)
    r_p = linear_residual(G, trans, ing.p, q)
    r_f = float(np.abs(ing.P_f - ing.P_beta - ing.alpha * ing.P_I).max())
    worst = max(r_I, r_b, r_p, r_f)
    return Certificate("lyapunov_residuals", worst <= LYAPUNOV_TOL, worst, LYAPUNOV_TOL,
                       details={"P_I": r_I, "P_beta": r_b, "p": r_p, "P_f": r_f})


def verify_containment(sys, ing):
    """Support-function check of ``X_i^f x {kappa_f} inside Y_i`` and of ``X_i^f`` in the delta-ball."""
    worst = -np.inf
    for i in range(ing.num_modes):
        Y = sys.constraints[i]
        g = Y.Hx + Y.Hu @ ing.K[i]
        slack = Y.h - Y.Hx @ ing.x_s - Y.Hu @ ing.u_s[i]
        Einv = np.linalg.inv(ing.E[i])
        support = np.sqrt(ing.c[i] * np.einsum("ri,ij,rj->r", g, Einv, g))
        worst = max(worst, float((support - slack).max()))
        radius = math.sqrt(ing.c[i] / np.linalg.eigvalsh(ing.E[i])[0])
        worst = max(worst, radius - ing.delta)
    return Certificate("containment", worst <= 1e-12, worst, 1e-12)


def lmi_chain_residuals(ing: TerminalIngredients, chain: MarkovChain) -> dict:
    """Smallest eigenvalue of each form of the decrease condition, per ``(i, j)``.

    Keys: ``"synthesis"`` (affine form in ``Z, Y``), ``"schur"``,
    ``"stacked"``, ``"s_lemma"`` and ``"ball"``.
    """
    G = ing.closed_loop
    out = {"synthesis": [], "schur": [], "stacked": [], "s_lemma": [], "ball": []}
    for i in range(ing.num_modes):
        out["ball"].append(min_eigenvalue(ball_lmi(ing.Z[i], ing.diagnostics["delta_cap"])))
        for j in chain.cover(i):
            g, tau = ing.gamma[i], ing.tau
            out["synthesis"].append(min_eigenvalue(synthesis_lmi(ing.Z[i], ing.Z[j], ing.A[i], ing.B[i],
                                                                 ing.Y[i], g, tau)))
            if g > 0:
                out["schur"].append(min_eigenvalue(schur_lmi(ing.E[i], ing.E[j], G[i], g, tau)))
                out["stacked"].append(min_eigenvalue(stacked_decrease_lmi(ing.E[i], ing.E[j], G[i], g, tau)))
                out["s_lemma"].append(min_eigenvalue(decrease_lmi(ing.E[i], ing.E[j], G[i], g, tau)))
            else:
                out["s_lemma"].append(min_eigenvalue(ing.E[i] - G[i].T @ ing.E[j] @ G[i]))
    return out


def run_certificates(sys, ing, sample_budget=10_000, storage=None):
    certs = list(verify_upi(sys, ing, sample_budget))
    certs.extend(verify_terminal_decrease(sys, ing, sample_budget, storage=storage))
    certs.append(verify_linearization_error(sys, ing, sample_budget))
    certs.extend(verify_smoothness_chain(sys, ing, sample_budget))
    certs.append(verify_lyapunov_residuals(sys, ing))
    certs.append(verify_containment(sys, ing))
    return tuple(certs)


# ----------------------------------------------------------------------------
# pipeline


def _common_level(sys, ing_parts, delta):
    """Largest common level (at most 1) keeping every ellipsoid in the ball,
    in the constraint sets, and inside the region where gamma is valid."""
    E, K, x_s, u_s, gamma, beta_f = ing_parts
    nu = E.shape[0]
    c = 1.0
    reasons = {"unit": 1.0}
    for i in range(nu):
        lam = float(np.linalg.eigvalsh(E[i])[0])
        c_ball = LEVEL_SAFETY * delta**2 * lam
        Y = sys.constraints[i]
        g = Y.Hx + Y.Hu @ K[i]
        slack = Y.h - Y.Hx @ x_s - Y.Hu @ u_s[i]
        if (slack <= 0).any():
            raise DesignError(f"steady state is on the boundary of the constraint set of mode {i}",
                              {"mode": i, "slack": slack.tolist()})
        Einv = np.linalg.inv(E[i])
        gg = np.einsum("ri,ij,rj->r", g, Einv, g)
        with np.errstate(divide="ignore"):
            c_con = LEVEL_SAFETY * float(np.min(np.where(gg > 0, slack**2 / gg, np.inf)))
        c_gamma = np.inf
        if beta_f[i] > 0:
            # gamma_i = beta^2 c / (4 lam^2) at level c
            c_gamma = gamma[i] * 4 * lam**2 / beta_f[i] ** 2
        reasons[f"ball{i}"] = c_ball
        reasons[f"constraints{i}"] = c_con
        reasons[f"gamma{i}"] = c_gamma
        c = min(c, c_ball, c_con, c_gamma)
    return c, reasons


def design_terminal_ingredients(
    sys: SwitchingSystem,
    profile: SteadyStateProfile,
    delta_cap: float = 0.5,
    budget: float = DEFAULT_BUDGET,
    storage: StorageFunction | None = None,
    sample_budget: int = 10_000,
    tau_grid=TAU_GRID,
    certify: bool = True,
) -> TerminalIngredients:
    if not profile.common_equilibrium:
        raise DesignError("terminal ingredients need a common equilibrium (all modes share x_s and l_s)")
    x_s, u_s = profile.common_state, profile.u_s
    nu, n = sys.num_modes, sys.state_dim
    lin = linearize(sys, x_s, u_s)

    smooth = estimate_smoothness(sys, delta_cap, xs=x_s, us=u_s)
    beta_f = smooth.beta_f
    gammas = np.array([(b * delta_cap / 2) ** 2 for b in beta_f])
    history = []
    synth = None
    for _ in range(GAMMA_ROUNDS):
        synth = synthesize_gains_and_ellipsoids(lin, sys.chain, gammas, delta_cap, tau_grid)
        smooth = estimate_smoothness(sys, delta_cap, gains=synth.K, xs=x_s, us=u_s)
        beta_f = smooth.beta_f
        required = np.array([linearization_error_gamma(beta_f[i], synth.E[i], 1.0, delta_cap) for i in range(nu)])
        history.append({"gamma_used": gammas.tolist(), "gamma_required": required.tolist(), "tau": synth.tau})
        if np.all(required <= gammas * (1 + 1e-12)) and np.all(required >= gammas / (1 + GAMMA_REL_TOL)):
            break
        if np.all(required <= gammas * (1 + 1e-12)) and np.all(required == 0):
            break
        gammas = 1.02 * required
    # whatever the loop ended with, the level shrink below makes gamma valid

    K, E = synth.K, synth.E
    G = [lin.A[i] + lin.B[i] @ K[i] for i in range(nu)]
    beta_l = smooth.beta_l
    P_I, _, _ = coupled_lyapunov(G, sys.chain, Q=[np.eye(n)] * nu)
    q = lin.q(list(K))
    P_beta, p, _ = coupled_lyapunov(G, sys.chain, Q=[b * np.eye(n) for b in beta_l], q=q)
    alpha, delta = select_alpha_delta(G, sys.chain.transition, P_I, P_beta, p, beta_f, delta_cap, budget)
    P_f = P_beta + alpha * P_I
    level, reasons = _common_level(sys, (E, K, x_s, u_s, gammas, beta_f), delta)
    if level <= 0:
        raise DesignError("terminal sets collapse to a point", {"level_reasons": reasons})
    ing = TerminalIngredients(
        x_s=x_s.copy(), u_s=np.array(u_s), ell_s=profile.common_cost, K=K, P_f=P_f, p=p, E=E,
        c=np.full(nu, level), Z=synth.Z, Y=synth.Y, P_I=P_I, P_beta=P_beta, alpha=alpha, delta=delta,
        tau=synth.tau, gamma=gammas, beta_f=np.asarray(beta_f), beta_l=np.asarray(beta_l),
        A=np.array(lin.A), B=np.array(lin.B), budget=budget,
        smoothness_source=tuple(smooth.source_f) + tuple(smooth.source_l),
        diagnostics={"delta_cap": delta_cap, "gamma_history": history, "level_reasons": reasons,
                     "lmi_margin": synth.margin, "per_tau_margins": [list(t) for t in synth.per_tau_margins]},
    )
    if certify:
        certs = run_certificates(sys, ing, sample_budget, storage)
        ing = ing.replace(certificates=certs)
        failed = [c for c in certs if not c.passed]
        if failed:
            raise DesignError(
                "certificate failure: " + ", ".join(f"{c.name} (worst {c.worst:.3e})" for c in failed),
                {"certificates": [c.summary() for c in certs]},
            )
    return ing
