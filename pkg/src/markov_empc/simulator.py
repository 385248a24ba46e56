"""Closed-loop Monte Carlo runs of the receding-horizon controller.

Every trajectory draws its modes from its own counter-based stream
(``Philox`` keyed by ``(seed, trajectory)``), so results do not depend on
how trajectories are spread over workers.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import SolverError
from .markov_chain import MarkovChain
from .ocp import DriftSample, Formulation, OcpSolver, OcpSpec, shift_policy
from .steady_state import SteadyStateProfile


def trajectory_rng(seed: int, trajectory: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, trajectory], dtype=np.uint64)))


def next_mode(chain: MarkovChain, theta: int, u: float) -> int:
    """Inverse-CDF draw from row ``theta`` given a uniform ``u``."""
    cdf = np.cumsum(chain.transition[theta])
    return int(min(np.searchsorted(cdf, u, side="right"), chain.num_modes - 1))


def sample_mode_path(chain: MarkovChain, theta0: int, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Modes ``theta_0, ..., theta_steps``."""
    theta0 = chain._check_mode(theta0)
    out = np.empty(steps + 1, dtype=int)
    out[0] = theta0
    draws = rng.random(steps)
    for k in range(steps):
        out[k + 1] = next_mode(chain, out[k], draws[k])
    return out


def ell_N(chain: MarkovChain, profile: SteadyStateProfile, N: int, theta: int) -> float:
    """Expected cost of the bridging move appended at stage ``N``.

    ``sum_a P^{N-1}[theta, a] sum_b p_ab l(x_s^{bet(a)}, ubar^{bet(a), b}, b)``.
    """
    dist = chain.distribution_after(N - 1, theta)
    total = 0.0
    for a in range(chain.num_modes):
        if dist[a] == 0:
            continue
        inner = 0.0
        for b in chain.cover(a):
            inner += chain.transition[a, b] * profile.bridge_cost[profile.bet[a], b]
        total += dist[a] * inner
    return float(total)


def ell_N_by_enumeration(chain: MarkovChain, profile: SteadyStateProfile, N: int, theta: int) -> float:
    """Same quantity by summing over every mode path of length ``N`` (small ``N`` only)."""
    nu = chain.num_modes
    P = chain.transition
    total = 0.0
    for path in itertools.product(range(nu), repeat=N):
        prob = 1.0
        prev = theta
        for t in path:
            prob *= P[prev, t]
            prev = t
            if prob == 0:
                break
        if prob == 0:
            continue
        a = theta if N == 1 else path[-2]
        b = path[-1]
        total += prob * profile.bridge_cost[profile.bet[a], b]
    return float(total)


def ell_infinity(chain: MarkovChain, profile: SteadyStateProfile, N: int) -> float:
    pi = chain.stationary_distribution()
    return float(sum(pi[i] * ell_N(chain, profile, N, i) for i in range(chain.num_modes)))


@dataclass(frozen=True)
class SimulationConfig:
    spec: OcpSpec
    x0: np.ndarray
    theta0: int
    steps: int = 200
    trajectories: int = 100
    seed: int = 0
    record_drift: bool = False
    record_paths: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.steps < 1 or self.trajectories < 1:
            raise ValueError("steps and trajectories must be >= 1")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(self.spec.system.state_dim))


@dataclass(frozen=True)
class Failure:
    trajectory: int
    step: int
    state: np.ndarray
    mode: int
    message: str


@dataclass
class _Trajectory:
    modes: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    costs: np.ndarray
    failure: Failure | None = None
    drift: list = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class SimulationReport:
    modes: np.ndarray  # (M, T) modes in which each step is taken
    states: np.ndarray  # (M, T + 1, n)
    inputs: np.ndarray  # (M, T, m)
    costs: np.ndarray  # (M, T)
    mean_square: np.ndarray  # (T + 1,)
    running_average: np.ndarray  # (M,)
    mean_cost: float
    standard_error: float
    ell_infinity: float | None
    ell_s: float | None
    bound: float
    failures: tuple
    drift: tuple  # (trajectory, step, DriftSample)
    steps: int
    seed: int

    @property
    def feasible(self) -> bool:
        return not self.failures

    @property
    def bound_satisfied(self) -> bool:
        se = self.standard_error if np.isfinite(self.standard_error) else 0.0
        return self.mean_cost <= self.bound + 2.0 * se

    def log_slope(self, start: int | None = None, stop: int | None = None) -> float:
        """Least-squares slope of ``log s_k`` over ``k in [start, stop]`` (default: last half)."""
        T = self.steps
        start = T // 2 if start is None else start
        stop = T if stop is None else stop
        k = np.arange(start, stop + 1)
        s = np.maximum(self.mean_square[start : stop + 1], np.finfo(float).tiny)
        return float(np.polyfit(k, np.log(s), 1)[0])

    @property
    def decay_ratio(self) -> float:
        s0 = self.mean_square[0]
        return float(self.mean_square[-1] / s0) if s0 > 0 else 0.0

    def drift_violations(self, tol: float = 1e-5) -> list:
        return [(t, k, d) for t, k, d in self.drift if d.slack < -tol]

    def summary(self) -> dict:
        out = {
            "steps": self.steps,
            "trajectories": int(self.costs.shape[0]),
            "seed": self.seed,
            "mean_running_average": self.mean_cost,
            "standard_error": self.standard_error,
            "bound": self.bound,
            "bound_plus_2se": self.bound + 2.0 * (self.standard_error if np.isfinite(self.standard_error) else 0.0),
            "bound_satisfied": self.bound_satisfied,
            "ell_infinity": self.ell_infinity,
            "ell_s": self.ell_s,
            "mean_square_initial": float(self.mean_square[0]),
            "mean_square_final": float(self.mean_square[-1]),
            "decay_ratio": self.decay_ratio,
            "failures": [
                {"trajectory": f.trajectory, "step": f.step, "state": f.state.tolist(), "mode": f.mode,
                 "message": f.message}
                for f in self.failures
            ],
        }
        if self.steps >= 2:
            out["log_slope_last_half"] = self.log_slope()
        if self.drift:
            slacks = np.array([d.slack for _, _, d in self.drift])
            out["drift_samples"] = len(self.drift)
            out["drift_min_slack"] = float(slacks.min())
        return out

    def write_csv(self, path) -> None:
        M, T = self.costs.shape
        n, m = self.states.shape[2], self.inputs.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "trajectory", "mode"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)]
                       + ["stage_cost", "running_average"])
            for r in range(M):
                total = 0.0
                for k in range(T):
                    if np.isnan(self.costs[r, k]):
                        break
                    total += self.costs[r, k]
                    w.writerow([k, r, int(self.modes[r, k])] + [repr(float(v)) for v in self.states[r, k]]
                               + [repr(float(v)) for v in self.inputs[r, k]]
                               + [repr(float(self.costs[r, k])), repr(float(total / (k + 1)))])


def performance_bound(spec: OcpSpec) -> tuple:
    """``(ell_infinity, ell_s, bound)`` for the formulation of ``spec``."""
    chain, prof = spec.system.chain, spec.profile
    ell_s = prof.common_cost if prof.common_equilibrium else None
    if spec.formulation is Formulation.TERMINAL_EQUALITY:
        ell_inf = ell_infinity(chain, prof, spec.horizon)
        return ell_inf, ell_s, ell_inf
    return None, ell_s, ell_s


def _reference_state(spec: OcpSpec) -> np.ndarray:
    prof = spec.profile
    return prof.common_state if prof.common_equilibrium else np.zeros(spec.system.state_dim)


def _drift(spec, solver, x, theta, pol, x_next, ell_n):
    sys = spec.system
    P = sys.chain.transition[theta]
    succ = [solver.solve(x_next, j).value for j in sys.chain.cover(theta)]
    drift = sum(P[j] * v for j, v in zip(sys.chain.cover(theta), succ)) - pol.value
    cost = sys.stage_cost(x, pol.first_input, theta)
    if spec.rotated:
        bound = -spec.storage.rho[theta](x)
    elif spec.formulation is Formulation.TERMINAL_EQUALITY:
        bound = ell_n[theta] - cost
    else:
        bound = spec.ell_s - cost
    return DriftSample(float(drift), float(cost), float(bound), pol.value, tuple(succ))


def _run_one(config: SimulationConfig, solver: OcpSolver, index: int, ell_n) -> _Trajectory:
    spec = config.spec
    sys = spec.system
    T, n, m = config.steps, sys.state_dim, sys.input_dim
    rng = trajectory_rng(config.seed, index)
    modes = sample_mode_path(sys.chain, config.theta0, T, rng)
    states = np.full((T + 1, n), np.nan)
    inputs = np.full((T, m), np.nan)
    costs = np.full(T, np.nan)
    states[0] = config.x0
    out = _Trajectory(modes[:T].copy(), states, inputs, costs)
    x = config.x0.copy()
    warm = None
    for k in range(T):
        theta = int(modes[k])
        try:
            pol = solver.solve(x, theta, warm_start=warm)
        except SolverError as exc:
            out.failure = Failure(index, k, x.copy(), theta, str(exc))
            return out
        u = pol.first_input
        x_next = sys.step(x, u, theta)
        if config.record_drift:
            try:
                out.drift.append((index, k, _drift(spec, solver, x, theta, pol, x_next, ell_n)))
            except SolverError as exc:
                out.failure = Failure(index, k, x_next.copy(), theta, f"successor problem failed: {exc}")
                return out
        inputs[k] = u
        costs[k] = sys.stage_cost(x, u, theta)
        states[k + 1] = x_next
        if not solver.convex and k + 1 < T:
            warm = shift_policy(spec, pol, solver.tree(int(modes[k + 1])))
        x = x_next
    return out


def run(config: SimulationConfig, solver: OcpSolver | None = None) -> SimulationReport:
    spec = config.spec
    sys = spec.system
    solver = solver or OcpSolver(spec)
    solver.solve(config.x0, config.theta0)  # feasibility pre-check; raises on failure
    ell_n = None
    if spec.formulation is Formulation.TERMINAL_EQUALITY:
        ell_n = np.array([ell_N(sys.chain, spec.profile, spec.horizon, i) for i in range(sys.num_modes)])
    indices = range(config.trajectories)
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            trajs = list(pool.map(lambda r: _run_one(config, solver, r, ell_n), indices))
    else:
        trajs = [_run_one(config, solver, r, ell_n) for r in indices]

    modes = np.array([t.modes for t in trajs])
    states = np.array([t.states for t in trajs])
    inputs = np.array([t.inputs for t in trajs])
    costs = np.array([t.costs for t in trajs])
    failures = tuple(t.failure for t in trajs if t.failure is not None)
    drift = tuple(d for t in trajs for d in t.drift)
    ok = np.array([t.failure is None for t in trajs])

    ref = _reference_state(spec)
    if ok.any():
        sq = ((states[ok] - ref) ** 2).sum(axis=2)
        mean_square = sq.mean(axis=0)
        avg = costs[ok].mean(axis=1)
        mean_cost = float(avg.mean())
        se = float(avg.std(ddof=1) / math.sqrt(avg.size)) if avg.size > 1 else float("nan")
    else:
        mean_square = np.full(config.steps + 1, np.nan)
        mean_cost, se = float("nan"), float("nan")
    running = np.array([np.nanmean(c) if np.isfinite(c).any() else np.nan for c in costs])
    ell_inf, ell_s, bound = performance_bound(spec)
    if not config.record_paths:
        states = states[:, [0, -1]]
        inputs = inputs[:, :0]
    return SimulationReport(
        modes, states, inputs, costs, mean_square, running, mean_cost, se, ell_inf, ell_s, bound,
        failures, drift, config.steps, config.seed,
    )


__all__ = [
    "trajectory_rng", "sample_mode_path", "ell_N", "ell_N_by_enumeration", "ell_infinity",
    "SimulationConfig", "SimulationReport", "Failure", "run", "performance_bound",
]
