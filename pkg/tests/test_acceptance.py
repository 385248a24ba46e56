"""Acceptance suite. Each criterion is tagged with ``acceptance(number, title)``;
the terminal summary prints one PASS/FAIL line per criterion."""

import math

import numpy as np
import pytest

from markov_empc import StorageFunction, compute_profile, fixtures
from markov_empc.errors import SolverError
from markov_empc.markov_chain import MarkovChain
from markov_empc.ocp import Formulation, OcpSolver, OcpSpec, rotated_value_offset
from markov_empc.simulator import (
    SimulationConfig,
    ell_infinity,
    ell_N,
    ell_N_by_enumeration,
    run,
    sample_mode_path,
    trajectory_rng,
)
from markov_empc.system import check_dissipativity
from markov_empc.terminal import (
    coupled_lyapunov,
    lmi_chain_residuals,
    terminal_decrease_values,
    verify_lyapunov_residuals,
    verify_smoothness_chain,
)

from oracles import dense_kkt

TE, TS = Formulation.TERMINAL_EQUALITY, Formulation.TERMINAL_SET
HORIZON = 3


def _detail(request, text):
    request.node.user_properties.append(("detail", text))


def _design(request, name):
    return request.getfixturevalue(name)


def _plain(design):
    """``(sys, storage, prof, ing)`` from either fixture shape."""
    if len(design) == 3:
        sys, prof, ing = design
        return sys, None, prof, ing
    return design


@pytest.mark.acceptance(1, "recursive feasibility: 10 seeds x 1000 steps, zero infeasible solves")
@pytest.mark.slow
@pytest.mark.parametrize("design,x0", [("scalar_design", [1.0]), ("two_state_design", [0.5, -0.5])])
@pytest.mark.parametrize("formulation", [TE, TS])
def test_recursive_feasibility(request, design, x0, formulation):
    sys, _, prof, ing = _plain(_design(request, design))
    spec = OcpSpec(sys, prof, HORIZON, formulation, ingredients=ing)
    solver = OcpSolver(spec)
    failures = 0
    for seed in range(10):
        rep = run(SimulationConfig(spec, x0, 0, steps=1000, trajectories=1, seed=seed, record_paths=False),
                  solver)
        failures += len(rep.failures)
    _detail(request, f"{design}/{formulation.value}: {failures} failures")
    assert failures == 0


@pytest.mark.acceptance(2, "terminal-equality bound: J_hat <= l_inf + 2 SE, l_inf cross-checked to 1e-10")
@pytest.mark.slow
def test_bound_terminal_equality(request):
    sys = fixtures.scalar_mode_dependent()
    prof = compute_profile(sys)
    assert not prof.common_equilibrium
    assert abs(prof.ell_s[0] - prof.ell_s[1]) > 1e-3
    chain = sys.chain
    pi = chain.stationary_distribution()
    worst = 0.0
    for N in range(1, 7):
        enum = [ell_N_by_enumeration(chain, prof, N, th) for th in range(chain.num_modes)]
        for th in range(chain.num_modes):
            worst = max(worst, abs(ell_N(chain, prof, N, th) - enum[th]))
        worst = max(worst, abs(ell_infinity(chain, prof, N) - float(pi @ enum)))
    spec = OcpSpec(sys, prof, HORIZON, TE)
    rep = run(SimulationConfig(spec, [0.5], 0, steps=200, trajectories=100, seed=7, record_paths=False))
    _detail(request, f"J_hat {rep.mean_cost:.6f} SE {rep.standard_error:.2e} l_inf {rep.bound:.6f}, "
                     f"enumeration gap {worst:.1e}")
    assert worst <= 1e-10
    assert not rep.failures
    assert rep.mean_cost <= rep.ell_infinity + 2 * rep.standard_error


@pytest.mark.acceptance(3, "terminal-set bound: J_hat <= l_s + 2 SE")
@pytest.mark.slow
def test_bound_terminal_set(request, economic_design):
    sys, _, prof, ing = economic_design
    spec = OcpSpec(sys, prof, HORIZON, TS, ingredients=ing)
    rep = run(SimulationConfig(spec, [0.5], 0, steps=200, trajectories=100, seed=7, record_paths=False))
    _detail(request, f"J_hat {rep.mean_cost:.7f} SE {rep.standard_error:.2e} l_s {rep.ell_s:.7f}")
    assert not rep.failures
    assert rep.mean_cost <= rep.ell_s + 2 * rep.standard_error


@pytest.mark.acceptance(4, "mean-square stability: s_200/s_0 <= 1e-3, negative log-slope on [100, 200]")
@pytest.mark.slow
@pytest.mark.parametrize("design,x0", [("scalar_design", [1.0]), ("two_state_design", [0.5, -0.5])])
@pytest.mark.parametrize("formulation", [TE, TS])
def test_mean_square_stability(request, design, x0, formulation):
    sys, _, prof, ing = _plain(_design(request, design))
    # tracking costs: zero storage with rho = x'x / 2 certifies strict dissipativity
    n = sys.state_dim
    storage = StorageFunction.affine([np.zeros(n)] * 2, [0.0, 0.0], 0.5, np.zeros(n))
    cert = check_dissipativity(sys, storage, prof.common_cost, sample_budget=2000)
    assert cert.passed
    spec = OcpSpec(sys, prof, HORIZON, formulation, ingredients=ing)
    rep = run(SimulationConfig(spec, x0, 0, steps=200, trajectories=100, seed=7, record_paths=False))
    slope = rep.log_slope(100, 200)
    _detail(request, f"{design}/{formulation.value}: ratio {rep.decay_ratio:.1e} slope {slope:.2f}")
    assert not rep.failures
    assert rep.decay_ratio <= 1e-3
    assert slope < 0


@pytest.mark.acceptance(4, "mean-square stability: s_200/s_0 <= 1e-3, negative log-slope on [100, 200]")
@pytest.mark.slow
def test_mean_square_decay_economic(request, economic_design):
    # s_k reaches the rounding floor early here, so only the decay ratio is meaningful
    sys, storage, prof, ing = economic_design
    spec = OcpSpec(sys, prof, HORIZON, TS, storage=storage, ingredients=ing)
    rep = run(SimulationConfig(spec, [0.5], 0, steps=200, trajectories=20, seed=7, record_paths=False))
    _detail(request, f"economic/terminal_set: ratio {rep.decay_ratio:.1e}")
    assert not rep.failures
    assert rep.decay_ratio <= 1e-3


@pytest.mark.acceptance(5, "rotated equivalence: root inputs and value offsets to 1e-6 at 50 states")
@pytest.mark.parametrize("design", ["economic_design", "two_state_economic_design"])
@pytest.mark.parametrize("formulation", [TE, TS])
def test_rotated_equivalence(request, design, formulation):
    sys, storage, prof, ing = _design(request, design)
    spec = OcpSpec(sys, prof, HORIZON, formulation, storage=storage, ingredients=ing)
    plain, rot = OcpSolver(spec), OcpSolver(spec.with_rotation(True))
    rng = np.random.default_rng(11)
    du = dv = 0.0
    count = 0
    while count < 50:
        x = rng.uniform(-2.0, 2.0, sys.state_dim)
        th = int(rng.integers(0, sys.num_modes))
        try:
            a = plain.solve(x, th)
        except SolverError:
            continue
        b = rot.solve(x, th)
        du = max(du, float(np.abs(a.first_input - b.first_input).max()))
        dv = max(dv, abs(b.value - a.value - rotated_value_offset(spec, x, th)))
        count += 1
    _detail(request, f"{design}/{formulation.value}: du {du:.1e} dV {dv:.1e}")
    assert du <= 1e-6
    assert dv <= 1e-6


def _drift_run(spec, x0, seed):
    # many short runs: the closed loop settles within a few steps, so long runs log mostly x = x_s
    rep = run(SimulationConfig(spec, x0, 0, steps=10, trajectories=50, seed=seed, record_drift=True))
    assert not rep.failures
    slacks = np.array([d.slack for _, _, d in rep.drift])
    return slacks


@pytest.mark.acceptance(6, "drift inequalities hold at 500 of 500 logged steps within 1e-5")
@pytest.mark.slow
@pytest.mark.parametrize("case", ["mode_dependent", "scalar", "economic_rotated_te", "economic_rotated_ts"])
def test_drift_inequalities(request, case):
    if case == "mode_dependent":
        sys = fixtures.scalar_mode_dependent()
        spec = OcpSpec(sys, compute_profile(sys), HORIZON, TE)
    elif case == "scalar":
        sys, prof, _ = request.getfixturevalue("scalar_design")
        spec = OcpSpec(sys, prof, HORIZON, TE)
    else:
        sys, storage, prof, ing = request.getfixturevalue("economic_design")
        form = TE if case.endswith("te") else TS
        spec = OcpSpec(sys, prof, HORIZON, form, rotated=True, storage=storage, ingredients=ing)
    slacks = _drift_run(spec, [1.5], 3)
    _detail(request, f"{case}: {slacks.size} steps, min slack {slacks.min():.1e}")
    assert slacks.size == 500
    assert (slacks >= -1e-5).all()


@pytest.mark.acceptance(7, "coupled Lyapunov residuals <= 1e-8; scalar series 4/3 and 2 to 1e-10")
@pytest.mark.parametrize("design", ["scalar_design", "economic_design", "two_state_design",
                                    "two_state_economic_design", "nonlinear_design"])
def test_coupled_lyapunov(request, design):
    sys, _, _, ing = _plain(_design(request, design))
    cert = verify_lyapunov_residuals(sys, ing)
    P, p, _ = coupled_lyapunov([np.array([[0.5]])], np.array([[1.0]]), Q=[np.eye(1)], q=[np.ones(1)])
    gap = max(abs(P[0, 0, 0] - 4.0 / 3.0), abs(p[0, 0] - 2.0))
    _detail(request, f"{design}: residual {cert.worst:.1e}")
    assert cert.worst <= 1e-8
    assert gap <= 1e-10


@pytest.mark.acceptance(8, "smoothness chain on the nonlinear fixture; LV_f + l_bar <= 1e-8 on X^f")
def test_smoothness_chain(request, nonlinear_design):
    sys, prof, ing = nonlinear_design
    upper, gap = verify_smoothness_chain(sys, ing, sample_budget=10_000, seed=21)
    rng = np.random.default_rng(22)
    worst = -np.inf
    for i in range(sys.num_modes):
        L = np.linalg.cholesky(ing.E[i])
        v = rng.normal(size=(10_000, sys.state_dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v *= np.sqrt(ing.c[i]) * rng.uniform(size=(10_000, 1)) ** (1.0 / sys.state_dim)
        for z in np.linalg.solve(L.T, v.T).T:
            lv, rhs = terminal_decrease_values(sys, ing, ing.x_s + z, i)
            worst = max(worst, lv - rhs)
    _detail(request, f"upper bound {upper.worst:.1e}, gap {gap.worst:.1e}, LV_f + l_bar {worst:.1e}")
    assert upper.worst <= 1e-9
    assert gap.worst <= 1e-9
    assert worst <= 1e-8


@pytest.mark.acceptance(9, "LMI chain min eigenvalue >= -1e-8; 1e4 boundary samples per (i, j) contained")
@pytest.mark.parametrize("design", ["scalar_design", "two_state_design", "nonlinear_design"])
def test_lmi_chain_and_upi(request, design):
    sys, _, _, ing = _plain(_design(request, design))
    res = lmi_chain_residuals(ing, sys.chain)
    lmi_worst = min(min(v) for v in res.values() if v)
    rng = np.random.default_rng(31)
    excess = -np.inf
    pairs = 0
    for i in range(sys.num_modes):
        L = np.linalg.cholesky(ing.E[i])
        v = rng.normal(size=(10_000, sys.state_dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        zs = np.linalg.solve(L.T, (np.sqrt(ing.c[i]) * v).T).T  # exactly z'E_i z = c_i
        succ = [sys.step(ing.x_s + z, ing.kappa_f(ing.x_s + z, i), i) for z in zs]
        for j in sys.chain.cover(i):
            pairs += 1
            excess = max(excess, max(ing.level_value(x, j) / ing.c[j] - 1.0 for x in succ))
    _detail(request, f"{design}: LMI {lmi_worst:.1e}, {pairs} pairs, worst excess {excess:.2e}")
    assert lmi_worst >= -1e-8
    assert excess <= 1e-8


@pytest.mark.acceptance(10, "tree solver matches dense KKT oracle to 1e-6 at 25 initial conditions")
@pytest.mark.parametrize("name", ["scalar", "two_state"])
@pytest.mark.parametrize("N", [1, 2, 3])
def test_kkt_oracle(request, name, N):
    sys = fixtures.scalar_mjls() if name == "scalar" else fixtures.two_state_mjls()
    prof = compute_profile(sys)
    solver = OcpSolver(OcpSpec(sys, prof, N))
    tree = solver.tree(0)
    assert tree.num_nodes * sys.state_dim + tree.num_decision_nodes * sys.input_dim <= 50
    rng = np.random.default_rng(41 + N)
    worst = 0.0
    for _ in range(25):
        x0 = rng.uniform(-0.5, 0.5, sys.state_dim)
        theta = int(rng.integers(0, 2))
        value, u0, viol = dense_kkt(sys, prof, x0, theta, N)
        assert viol <= 0
        pol = solver.solve(x0, theta)
        worst = max(worst, abs(pol.value - value), float(np.abs(pol.first_input - u0).max()))
    _detail(request, f"{name} N={N}: {worst:.1e}")
    assert worst <= 1e-6


@pytest.mark.acceptance(11, "stationary distribution (5/6, 1/6) to 1e-10; transitions within 3 sigma")
def test_chain_analytics(request):
    chain = MarkovChain(np.array([[0.9, 0.1], [0.5, 0.5]]))
    pi = chain.stationary_distribution()
    err = float(np.abs(pi - [5 / 6, 1 / 6]).max())
    path = sample_mode_path(chain, 0, 100_000, trajectory_rng(2024, 0))
    counts = np.zeros((2, 2))
    np.add.at(counts, (path[:-1], path[1:]), 1)
    worst = 0.0
    for i in range(2):
        total = counts[i].sum()
        for j in range(2):
            p = chain.transition[i, j]
            worst = max(worst, abs(counts[i, j] / total - p) / math.sqrt(p * (1 - p) / total))
    _detail(request, f"pi error {err:.1e}, worst deviation {worst:.2f} sigma")
    assert err <= 1e-10
    assert worst <= 3.0
