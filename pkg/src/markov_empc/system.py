"""Switching dynamics, stage costs, constraint sets and storage functions.

A system is a list of per-mode dynamics ``f_i(x, u)``, per-mode stage costs
``l_i(x, u)`` and per-mode polytopic constraint sets ``Y_i`` on the stacked
vector ``(x, u)``. Dynamics and costs are plain callables; the classes below
additionally expose analytic derivatives, which the solvers use when present
and replace by central finite differences otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import ModelError
from .markov_chain import MarkovChain

FD_RELATIVE_STEP = 1e-6
SMOOTHNESS_SAFETY = 1.5


def _vec(a, dim=None, name="vector"):
    v = np.atleast_1d(np.asarray(a, dtype=float)).ravel()
    if dim is not None and v.shape != (dim,):
        raise ModelError(f"{name} must have length {dim}, got {v.shape[0]}")
    return v


# ----------------------------------------------------------------------------
# dynamics


class LinearDynamics:
    """``f(x, u) = A x + B u + w``."""

    def __init__(self, A, B, w=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.asarray(B, dtype=float).reshape(self.A.shape[0], -1)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ModelError(f"A must be square, got {self.A.shape}")
        self.w = np.zeros(n) if w is None else _vec(w, n, "offset w")

    @property
    def state_dim(self):
        return self.A.shape[0]

    @property
    def input_dim(self):
        return self.B.shape[1]

    def __call__(self, x, u):
        return self.A @ x + self.B @ u + self.w

    def jacobian(self, x, u):
        return self.A, self.B

    def smoothness(self):
        return 0.0

    def __repr__(self):
        return f"LinearDynamics(A={self.A.tolist()}, B={self.B.tolist()}, w={self.w.tolist()})"


class QuadraticStateDynamics(LinearDynamics):
    """``f(x, u) = A x + B u + w + coef * x**2`` (elementwise square).

    The Jacobian ``A + 2 diag(coef * x)`` is globally Lipschitz with constant
    ``2 max|coef|``, which is returned as the analytic smoothness constant.
    """

    def __init__(self, A, B, coef, w=None):
        super().__init__(A, B, w)
        self.coef = _vec(coef, self.state_dim, "coef") if np.ndim(coef) else np.full(self.state_dim, float(coef))

    def __call__(self, x, u):
        return super().__call__(x, u) + self.coef * x * x

    def jacobian(self, x, u):
        return self.A + np.diag(2.0 * self.coef * x), self.B

    def smoothness(self):
        return 2.0 * float(np.abs(self.coef).max())


# ----------------------------------------------------------------------------
# costs


class QuadraticCost:
    """``l(x, u) = z' W z + w' z + c`` with ``z = (x, u)``.

    With ``input_dim == 0`` this doubles as a quadratic function of ``x``
    alone (used for terminal costs).
    """

    def __init__(self, W, w=None, c=0.0, state_dim=None):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        if W.shape[0] != W.shape[1]:
            raise ModelError(f"cost matrix must be square, got {W.shape}")
        self.W = 0.5 * (W + W.T)
        d = W.shape[0]
        self.w = np.zeros(d) if w is None else _vec(w, d, "cost vector w")
        self.c = float(c)
        self.state_dim = d if state_dim is None else int(state_dim)

    @classmethod
    def from_blocks(cls, Q, R, S=None, q=None, r=None, c=0.0):
        """``x'Qx + u'Ru + 2 x'Su + q'x + r'u + c``."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        R = np.atleast_2d(np.asarray(R, dtype=float))
        n, m = Q.shape[0], R.shape[0]
        S = np.zeros((n, m)) if S is None else np.asarray(S, dtype=float).reshape(n, m)
        W = np.block([[Q, S], [S.T, R]])
        q = np.zeros(n) if q is None else _vec(q, n)
        r = np.zeros(m) if r is None else _vec(r, m)
        return cls(W, np.concatenate([q, r]), c, state_dim=n)

    @property
    def input_dim(self):
        return self.W.shape[0] - self.state_dim

    def _z(self, x, u):
        if self.input_dim == 0:
            return np.asarray(x, dtype=float)
        return np.concatenate([np.atleast_1d(x), np.atleast_1d(u)])

    def __call__(self, x, u=None):
        z = self._z(x, u)
        return float(z @ self.W @ z + self.w @ z + self.c)

    def batch(self, Z):
        """Values at the rows of ``Z`` (stacked ``(x, u)`` points)."""
        return np.einsum("ki,ij,kj->k", Z, self.W, Z) + Z @ self.w + self.c

    def gradient(self, x, u=None):
        g = 2.0 * self.W @ self._z(x, u) + self.w
        n = self.state_dim
        return g[:n], g[n:]

    def hessian(self, x=None, u=None):
        return 2.0 * self.W

    def __repr__(self):
        return f"QuadraticCost(W={self.W.tolist()}, w={self.w.tolist()}, c={self.c})"


# ----------------------------------------------------------------------------
# constraint sets


class ConstraintSet:
    """Polytope ``{(x, u) : H [x; u] <= h}``, required nonempty and bounded.

    Nonemptiness is certified by a Chebyshev-centre LP (the centre is kept as
    ``interior_point``); boundedness by finite LP bounds on every coordinate,
    which also give the box hull used for sampling.
    """

    def __init__(self, H, h, state_dim: int, *, _box=None):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        h = _vec(h, H.shape[0], "h")
        if not (np.isfinite(H).all() and np.isfinite(h).all()):
            raise ModelError("constraint data must be finite")
        self.H, self.h = H, h
        self.state_dim = int(state_dim)
        d = H.shape[1]
        if _box is not None:
            self.lower, self.upper = _box
            self.interior_point = 0.5 * (self.lower + self.upper)
            self.chebyshev_radius = 0.5 * float((self.upper - self.lower).min())
            return
        norms = np.linalg.norm(H, axis=1)
        res = linprog(
            np.r_[np.zeros(d), -1.0],
            A_ub=np.c_[H, norms],
            b_ub=h,
            bounds=[(None, None)] * d + [(0, None)],
            method="highs",
        )
        if res.status == 2:
            raise ModelError("constraint set is empty")
        if res.status == 3:
            # unbounded radius means an unbounded polytope
            raise ModelError("constraint set is unbounded")
        self.interior_point = res.x[:d]
        self.chebyshev_radius = float(res.x[d])
        lower, upper = np.empty(d), np.empty(d)
        for k in range(d):
            e = np.zeros(d)
            e[k] = 1.0
            lo = linprog(e, A_ub=H, b_ub=h, bounds=[(None, None)] * d, method="highs")
            hi = linprog(-e, A_ub=H, b_ub=h, bounds=[(None, None)] * d, method="highs")
            if lo.status != 0 or hi.status != 0:
                raise ModelError(f"constraint set is unbounded along coordinate {k}")
            lower[k], upper[k] = lo.fun, -hi.fun
        self.lower, self.upper = lower, upper

    @classmethod
    def box(cls, x_min, x_max, u_min, u_max):
        lower = np.concatenate([_vec(x_min), _vec(u_min)])
        upper = np.concatenate([_vec(x_max), _vec(u_max)])
        if lower.shape != upper.shape:
            raise ModelError("box bounds have mismatched lengths")
        if not (np.isfinite(lower).all() and np.isfinite(upper).all()):
            raise ModelError("box bounds must be finite")
        if (lower > upper).any():
            raise ModelError("box is empty (lower > upper)")
        d = lower.size
        H = np.vstack([np.eye(d), -np.eye(d)])
        h = np.concatenate([upper, -lower])
        return cls(H, h, len(_vec(x_min)), _box=(lower, upper))

    @property
    def dim(self):
        return self.H.shape[1]

    @property
    def Hx(self):
        return self.H[:, : self.state_dim]

    @property
    def Hu(self):
        return self.H[:, self.state_dim :]

    def violation(self, x, u) -> float:
        z = np.concatenate([np.atleast_1d(x), np.atleast_1d(u)])
        return float((self.H @ z - self.h).max())

    def contains(self, x, u, tol=1e-9) -> bool:
        return self.violation(x, u) <= tol

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Uniform samples by rejection from the box hull; rows are ``(x, u)``."""
        out = []
        have = 0
        while have < count:
            cand = rng.uniform(self.lower, self.upper, size=(max(2 * (count - have), 16), self.dim))
            ok = cand[(cand @ self.H.T <= self.h + 1e-12).all(axis=1)]
            out.append(ok)
            have += len(ok)
        return np.vstack(out)[:count]

    def __repr__(self):
        return f"ConstraintSet(rows={self.H.shape[0]}, dim={self.dim})"


# ----------------------------------------------------------------------------
# storage functions


@dataclass(frozen=True, eq=False)
class StorageFunction:
    """Per-mode storage ``lambda_i(x)`` with dissipation bound ``rho_i(x)``.

    ``quadratic`` holds ``(Lambda_i, mu_i, c_i)`` such that
    ``lambda_i(x) = x' Lambda_i x + mu_i' x + c_i`` when the storage has that
    form; the convex solvers need it to rotate costs in closed form.
    """

    values: tuple
    rho: tuple
    gamma: float
    form: str = "user"
    quadratic: tuple | None = None

    @classmethod
    def quadratic_form(cls, Lambdas, mus, consts, gamma, x_s, rho=None):
        terms = tuple(
            (np.atleast_2d(np.asarray(L, dtype=float)), _vec(mu), float(c))
            for L, mu, c in zip(Lambdas, mus, consts)
        )
        values = tuple(_quad_fn(L, mu, c) for L, mu, c in terms)
        form = "affine" if all(not L.any() for L, _, _ in terms) else "quadratic"
        return cls(values, _default_rho(rho, gamma, x_s, len(terms)), float(gamma), form, terms)

    @classmethod
    def affine(cls, mus, consts, gamma, x_s, rho=None):
        n = len(_vec(mus[0]))
        return cls.quadratic_form([np.zeros((n, n))] * len(mus), mus, consts, gamma, x_s, rho)

    @classmethod
    def zero(cls, num_modes, state_dim, gamma, x_s=None, rho=None):
        x_s = np.zeros(state_dim) if x_s is None else x_s
        return cls.affine([np.zeros(state_dim)] * num_modes, [0.0] * num_modes, gamma, x_s, rho)

    @classmethod
    def from_callables(cls, values, gamma, x_s, rho=None):
        return cls(tuple(values), _default_rho(rho, gamma, x_s, len(values)), float(gamma), "user", None)

    @property
    def num_modes(self):
        return len(self.values)

    def __call__(self, x, theta) -> float:
        return float(self.values[theta](np.asarray(x, dtype=float)))

    def steady_value(self, x_s, tol=1e-10) -> float:
        """``lambda_s``; raises unless ``lambda(x_s, i)`` is mode independent."""
        vals = np.array([self(x_s, i) for i in range(self.num_modes)])
        if np.ptp(vals) > tol:
            raise ModelError(f"storage at the steady state depends on the mode: {vals}")
        return float(vals[0])

    def check_rho(self, x_s, radius=1.0, samples=1000, seed=0) -> float:
        """Smallest ``rho_i(x) - gamma |x - x_s|^2`` on a sample (must be >= 0)."""
        rng = np.random.default_rng(seed)
        x_s = _vec(x_s)
        pts = x_s + rng.uniform(-radius, radius, size=(samples, x_s.size))
        worst = np.inf
        for rho in self.rho:
            for x in pts:
                worst = min(worst, rho(x) - self.gamma * float((x - x_s) @ (x - x_s)))
        return float(worst)


def _quad_fn(L, mu, c):
    def fn(x):
        return float(x @ L @ x + mu @ x + c)

    return fn


def _default_rho(rho, gamma, x_s, nu):
    if rho is not None:
        return tuple(rho)
    x_s = _vec(x_s)

    def fn(x):
        d = np.asarray(x, dtype=float) - x_s
        return float(gamma * (d @ d))

    return tuple(fn for _ in range(nu))


# ----------------------------------------------------------------------------
# the switching system


@dataclass(frozen=True)
class Smoothness:
    """User-supplied smoothness constants (authoritative when present)."""

    beta_f: tuple[float, ...] | None = None
    beta_l: tuple[float, ...] | None = None


@dataclass(frozen=True, eq=False)
class SwitchingSystem:
    chain: MarkovChain
    dynamics: tuple
    costs: tuple
    constraints: tuple
    state_dim: int
    input_dim: int
    smoothness: Smoothness = field(default_factory=Smoothness)
    cost_check_samples: int = 200

    def __post_init__(self):
        nu = self.chain.num_modes
        for name in ("dynamics", "costs", "constraints"):
            seq = tuple(getattr(self, name))
            if len(seq) != nu:
                raise ModelError(f"{name}: expected {nu} modes, got {len(seq)}")
            object.__setattr__(self, name, seq)
        n, m = self.state_dim, self.input_dim
        for i, Y in enumerate(self.constraints):
            if Y.dim != n + m or Y.state_dim != n:
                raise ModelError(f"constraint set of mode {i} has dimension {Y.dim}, expected {n + m}")
        for i, f in enumerate(self.dynamics):
            x0 = self.constraints[i].interior_point[:n]
            u0 = self.constraints[i].interior_point[n:]
            y = np.asarray(f(x0, u0), dtype=float)
            if y.shape != (n,):
                raise ModelError(f"dynamics of mode {i} returned shape {y.shape}, expected ({n},)")
        rng = np.random.default_rng(12345)
        for i, (cost, Y) in enumerate(zip(self.costs, self.constraints)):
            pts = np.vstack([Y.interior_point, Y.sample(rng, self.cost_check_samples)])
            vals = np.array([cost(z[:n], z[n:]) for z in pts])
            if vals.min() < -1e-9:
                raise ModelError(f"stage cost of mode {i} is negative on Y ({vals.min():.3g})")

    @classmethod
    def linear(cls, chain, A, B, costs, constraints, offsets=None, smoothness=None):
        nu = chain.num_modes
        offsets = [None] * nu if offsets is None else offsets
        if not len(A) == len(B) == len(offsets) == nu:
            raise ModelError(f"linear data: expected {nu} modes, got {len(A)} A and {len(B)} B matrices")
        dyn = tuple(LinearDynamics(A[i], B[i], offsets[i]) for i in range(nu))
        return cls(
            chain, dyn, tuple(costs), tuple(constraints), dyn[0].state_dim, dyn[0].input_dim,
            smoothness or Smoothness(),
        )

    @property
    def num_modes(self):
        return self.chain.num_modes

    @property
    def is_linear(self) -> bool:
        return all(type(f) is LinearDynamics for f in self.dynamics)

    @property
    def is_quadratic(self) -> bool:
        return all(isinstance(c, QuadraticCost) for c in self.costs)

    def step(self, x, u, theta) -> np.ndarray:
        x = _vec(x, self.state_dim, "state")
        u = _vec(u, self.input_dim, "input")
        y = np.asarray(self.dynamics[theta](x, u), dtype=float)
        if not np.isfinite(y).all():
            raise ModelError(f"dynamics of mode {theta} produced a non-finite state at x={x}, u={u}")
        return y

    def stage_cost(self, x, u, theta) -> float:
        return float(self.costs[theta](np.asarray(x, dtype=float), np.asarray(u, dtype=float)))

    def jacobians(self, x, u, theta):
        f = self.dynamics[theta]
        if hasattr(f, "jacobian"):
            return f.jacobian(x, u)
        return finite_difference_jacobians(f, x, u)

    def cost_gradient(self, x, u, theta):
        c = self.costs[theta]
        if hasattr(c, "gradient"):
            return c.gradient(x, u)
        n = self.state_dim
        g = _fd_gradient(lambda z: c(z[:n], z[n:]), np.concatenate([x, u]))
        return g[:n], g[n:]

    def cost_hessian(self, x, u, theta):
        c = self.costs[theta]
        if hasattr(c, "hessian"):
            return c.hessian(x, u)
        n = self.state_dim
        return _fd_hessian(lambda z: c(z[:n], z[n:]), np.concatenate([x, u]))


def step(sys: SwitchingSystem, x, u, theta) -> np.ndarray:
    return sys.step(x, u, theta)


# ----------------------------------------------------------------------------
# finite differences


def _fd_step(z):
    return FD_RELATIVE_STEP * (1.0 + np.linalg.norm(z))


def finite_difference_jacobians(f, x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    h = _fd_step(np.concatenate([x, u]))
    n, m = x.size, u.size
    y0 = np.asarray(f(x, u))
    A = np.empty((y0.size, n))
    B = np.empty((y0.size, m))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        A[:, k] = (np.asarray(f(x + e, u)) - np.asarray(f(x - e, u))) / (2 * h)
    for k in range(m):
        e = np.zeros(m)
        e[k] = h
        B[:, k] = (np.asarray(f(x, u + e)) - np.asarray(f(x, u - e))) / (2 * h)
    if not (np.isfinite(A).all() and np.isfinite(B).all()):
        raise ModelError("non-finite finite-difference Jacobian")
    return A, B


def _fd_gradient(fn, z):
    h = _fd_step(z)
    g = np.empty(z.size)
    for k in range(z.size):
        e = np.zeros(z.size)
        e[k] = h
        g[k] = (fn(z + e) - fn(z - e)) / (2 * h)
    return g


def _fd_hessian(fn, z):
    h = 1e-4 * (1.0 + np.linalg.norm(z))
    d = z.size
    Hm = np.empty((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        Hm[:, k] = (_fd_gradient(fn, z + e) - _fd_gradient(fn, z - e)) / (2 * h)
    return 0.5 * (Hm + Hm.T)


# ----------------------------------------------------------------------------
# dissipativity


def storage_drift(sys: SwitchingSystem, storage: StorageFunction, x, u, theta) -> float:
    """``E[lambda(x+, theta+) - lambda(x, theta) | x, theta]`` for input ``u``."""
    x = np.asarray(x, dtype=float)
    x_next = sys.step(x, u, theta)
    P = sys.chain.transition[theta]
    expected = sum(P[j] * storage(x_next, j) for j in sys.chain.cover(theta))
    return expected - storage(x, theta)


def rotated_stage_cost(sys: SwitchingSystem, storage: StorageFunction, x, u, theta) -> float:
    """Stage cost minus the expected one-step storage increase."""
    return sys.stage_cost(x, u, theta) - storage_drift(sys, storage, x, u, theta)


@dataclass(frozen=True)
class Certificate:
    """Result of a sampled or algebraic check; ``passed`` iff ``worst <= tol``."""

    name: str
    passed: bool
    worst: float
    tol: float
    worst_sample: tuple | None = None
    details: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"name": self.name, "passed": bool(self.passed), "worst": float(self.worst), "tol": self.tol}
        out.update({k: v for k, v in self.details.items() if np.isscalar(v)})
        return out


def check_dissipativity(
    sys: SwitchingSystem,
    storage: StorageFunction,
    ell_s: float,
    sample_budget: int = 2000,
    seed: int = 0,
    extra_points=None,
    tol: float = 1e-8,
) -> Certificate:
    """Sampled check of ``L lambda(x, theta) <= l(x, u, theta) - l_s - rho(x, theta)``.

    ``extra_points`` (rows ``(x, u)``, e.g. the steady state) are checked for
    every mode on top of the uniform samples of each ``Y_theta``.
    """
    rng = np.random.default_rng(seed)
    n = sys.state_dim
    worst, worst_sample = -np.inf, None
    per_mode = max(1, sample_budget // sys.num_modes)
    for theta, Y in enumerate(sys.constraints):
        pts = Y.sample(rng, per_mode)
        if extra_points is not None:
            pts = np.vstack([np.atleast_2d(extra_points), pts])
        for z in pts:
            x, u = z[:n], z[n:]
            viol = storage_drift(sys, storage, x, u, theta) - (
                sys.stage_cost(x, u, theta) - ell_s - storage.rho[theta](x)
            )
            if viol > worst:
                worst, worst_sample = viol, (x.copy(), u.copy(), theta)
    return Certificate("dissipativity", worst <= tol, float(worst), tol, worst_sample)


# ----------------------------------------------------------------------------
# linearization and smoothness


@dataclass(frozen=True)
class Linearization:
    """Per-mode Jacobians at the equilibrium and the stage-cost gradient there.

    ``q(K)`` gives the gradient of the closed-loop shifted cost
    ``x -> l(x_s + x, u_s + K x) - l(x_s, u_s)`` at zero.
    """

    x_s: np.ndarray
    u_s: np.ndarray  # (nu, m) per-mode steady inputs
    A: tuple
    B: tuple
    grad_x: tuple
    grad_u: tuple

    def closed_loop(self, gains):
        return tuple(self.A[i] + self.B[i] @ gains[i] for i in range(len(self.A)))

    def q(self, gains):
        return tuple(self.grad_x[i] + gains[i].T @ self.grad_u[i] for i in range(len(self.A)))


def linearize(sys: SwitchingSystem, xs, us) -> Linearization:
    """Jacobians of each mode at ``(xs, us_i)``; ``us`` may be shared or per mode."""
    xs = _vec(xs, sys.state_dim, "xs")
    us = np.asarray(us, dtype=float)
    us = np.tile(us.ravel(), (sys.num_modes, 1)) if us.ndim <= 1 else us.reshape(sys.num_modes, sys.input_dim)
    A, B, gx, gu = [], [], [], []
    for i in range(sys.num_modes):
        Ai, Bi = sys.jacobians(xs, us[i], i)
        Ai = np.atleast_2d(np.asarray(Ai, dtype=float)).reshape(sys.state_dim, sys.state_dim)
        Bi = np.asarray(Bi, dtype=float).reshape(sys.state_dim, sys.input_dim)
        gxi, gui = sys.cost_gradient(xs, us[i], i)
        for arr in (Ai, Bi, gxi, gui):
            if not np.isfinite(arr).all():
                raise ModelError(f"non-finite derivative in mode {i}")
        A.append(Ai)
        B.append(Bi)
        gx.append(np.asarray(gxi, dtype=float))
        gu.append(np.asarray(gui, dtype=float))
    return Linearization(xs, us, tuple(A), tuple(B), tuple(gx), tuple(gu))


@dataclass(frozen=True)
class SmoothnessConstants:
    """Per-mode ``beta_f`` / ``beta_l`` with provenance.

    ``source`` is ``"user"``, ``"analytic"`` or ``"estimated"``; estimated
    values are the sampled lower estimates ``raw_*`` times the safety factor.
    """

    beta_f: np.ndarray
    beta_l: np.ndarray
    source_f: tuple
    source_l: tuple
    raw_f: np.ndarray
    raw_l: np.ndarray


def _lipschitz_estimate(grad, center, radius, samples, rng):
    """Largest ``|grad(x) - grad(y)| / |x - y|`` over sampled pairs in the ball."""
    n = center.size
    best = 0.0
    for _ in range(samples):
        x = center + radius * _ball_point(rng, n)
        y = center + radius * _ball_point(rng, n)
        dist = np.linalg.norm(x - y)
        if dist < 1e-9 * radius:
            continue
        diff = np.atleast_2d(grad(x) - grad(y))
        best = max(best, np.linalg.norm(diff, 2) / dist)
    return best


def _ball_point(rng, n):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v) * rng.uniform() ** (1.0 / n)


def estimate_smoothness(
    sys: SwitchingSystem,
    region_radius: float,
    sample_budget: int = 2000,
    gains=None,
    xs=None,
    us=None,
    seed: int = 0,
) -> SmoothnessConstants:
    """Smoothness constants of the closed-loop maps ``x -> f(x, u_s + K(x - x_s))``.

    User-supplied constants win; otherwise analytic ones from linear or
    quadratic structure; otherwise sampled estimates inflated by 1.5.
    """
    n, m, nu = sys.state_dim, sys.input_dim, sys.num_modes
    xs = np.zeros(n) if xs is None else _vec(xs, n)
    us = np.zeros((nu, m)) if us is None else np.asarray(us, dtype=float).reshape(-1, m)
    if us.shape[0] == 1:
        us = np.tile(us, (nu, 1))
    gains = [np.zeros((m, n))] * nu if gains is None else [np.asarray(K, dtype=float).reshape(m, n) for K in gains]
    rng = np.random.default_rng(seed)
    user = sys.smoothness
    beta_f, beta_l, src_f, src_l, raw_f, raw_l = [], [], [], [], [], []
    for i in range(nu):
        K = gains[i]
        closed = np.vstack([np.eye(n), K])
        if user.beta_f is not None:
            b, s, r = float(user.beta_f[i]), "user", float(user.beta_f[i])
        elif hasattr(sys.dynamics[i], "smoothness"):
            b = r = float(sys.dynamics[i].smoothness())
            s = "analytic"
        else:
            def jac(x, i=i, K=K):
                A, B = sys.jacobians(x, us[i] + K @ (x - xs), i)
                return A + B @ K

            r = _lipschitz_estimate(jac, xs, region_radius, sample_budget, rng)
            b, s = SMOOTHNESS_SAFETY * r, "estimated"
        beta_f.append(b), src_f.append(s), raw_f.append(r)

        if user.beta_l is not None:
            b, s, r = float(user.beta_l[i]), "user", float(user.beta_l[i])
        elif isinstance(sys.costs[i], QuadraticCost):
            Hcl = closed.T @ sys.costs[i].hessian() @ closed
            b = r = float(np.linalg.norm(Hcl, 2))
            s = "analytic"
        else:
            def grad(x, i=i, K=K):
                gx, gu = sys.cost_gradient(x, us[i] + K @ (x - xs), i)
                return np.asarray(gx) + K.T @ np.asarray(gu)

            r = _lipschitz_estimate(grad, xs, region_radius, sample_budget, rng)
            b, s = SMOOTHNESS_SAFETY * r, "estimated"
        beta_l.append(b), src_l.append(s), raw_l.append(r)
    return SmoothnessConstants(
        np.array(beta_f), np.array(beta_l), tuple(src_f), tuple(src_l), np.array(raw_f), np.array(raw_l)
    )


Callback = Callable[[np.ndarray, np.ndarray], np.ndarray]
__all__ = [
    "LinearDynamics", "QuadraticStateDynamics", "QuadraticCost", "ConstraintSet", "StorageFunction",
    "Smoothness", "SwitchingSystem", "Certificate", "Linearization", "SmoothnessConstants",
    "step", "storage_drift", "rotated_stage_cost", "check_dissipativity", "linearize",
    "estimate_smoothness", "finite_difference_jacobians",
]
