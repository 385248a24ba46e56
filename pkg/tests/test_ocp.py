import numpy as np
import pytest

from markov_empc import compute_profile, fixtures
from markov_empc.errors import InfeasibleError, SolverError, TreeTooLargeError
from markov_empc.markov_chain import MarkovChain
from markov_empc.ocp import (
    Formulation,
    OcpSolver,
    OcpSpec,
    lyapunov_drift_sample,
    receding_horizon_control,
    rotated_value_offset,
    shift_policy,
    solve,
)
from markov_empc.simulator import ell_N
from markov_empc.system import ConstraintSet, QuadraticCost, StorageFunction, SwitchingSystem

from oracles import dense_kkt, dense_nlp

TE, TS = Formulation.TERMINAL_EQUALITY, Formulation.TERMINAL_SET


def _one_mode(a, b, x_max=20.0, u_max=10.0):
    chain = MarkovChain(np.array([[1.0]]))
    box = ConstraintSet.box([-x_max], [x_max], [-u_max], [u_max])
    return SwitchingSystem.linear(chain, [np.array([[a]])], [np.array([[b]])],
                                  [QuadraticCost(np.eye(2), state_dim=1)], [box])


def _opaque(sys):
    """Same model behind plain callables, which routes solves through SCP."""
    dyn = tuple((lambda x, u, f=f: f(x, u)) for f in sys.dynamics)
    return SwitchingSystem(sys.chain, dyn, sys.costs, sys.constraints, sys.state_dim, sys.input_dim)


@pytest.fixture(scope="module")
def scalar_spec():
    sys = fixtures.scalar_mjls()
    return OcpSpec(sys, compute_profile(sys), 3)


class TestHandInstances:
    def test_equilibrium_stays(self, scalar_spec):
        pol = solve(scalar_spec, [0.0], 0)
        assert pol.value == pytest.approx(0.0, abs=1e-10)
        np.testing.assert_allclose(pol.inputs, 0.0, atol=1e-9)

    def test_economic_equilibrium_value(self):
        sys, storage = fixtures.scalar_economic()
        spec = OcpSpec(sys, compute_profile(sys), 4, storage=storage)
        pol = solve(spec, [0.0], 1)
        assert pol.value == pytest.approx(4 * 0.5, abs=1e-9)
        np.testing.assert_allclose(receding_horizon_control(spec, [0.0], 1), [0.0], atol=1e-9)

    def test_two_step_kkt_by_hand(self):
        sys = _one_mode(1.2, 1.0)
        spec = OcpSpec(sys, compute_profile(sys), 2)
        x0 = 0.7
        # u1 = -1.2 x1, so the cost is x0^2 + u0^2 + 2.44 (1.2 x0 + u0)^2
        c = 2.44
        u0 = -c * 1.2 * x0 / (1 + c)
        value = x0**2 + c * (1.2 * x0) ** 2 / (1 + c)
        pol = solve(spec, [x0], 0)
        assert pol.value == pytest.approx(value, abs=1e-9)
        assert pol.first_input[0] == pytest.approx(u0, abs=1e-9)

    def test_infeasible(self):
        sys = _one_mode(2.0, 1.0, x_max=20.0, u_max=1.0)
        spec = OcpSpec(sys, compute_profile(sys), 1)
        with pytest.raises(InfeasibleError):
            solve(spec, [10.0], 0)

    def test_node_cap(self):
        sys = fixtures.scalar_mjls()
        spec = OcpSpec(sys, compute_profile(sys), 12, node_cap=100)
        with pytest.raises(TreeTooLargeError):
            solve(spec, [0.0], 0)

    def test_spec_validation(self, scalar_spec):
        with pytest.raises(ValueError):
            OcpSpec(scalar_spec.system, scalar_spec.profile, 0)
        with pytest.raises(ValueError):
            OcpSpec(scalar_spec.system, scalar_spec.profile, 3, TS)
        with pytest.raises(ValueError):
            OcpSpec(scalar_spec.system, scalar_spec.profile, 3, rotated=True)


class TestOracles:
    @pytest.mark.parametrize("name, N", [("scalar", 2), ("scalar", 3), ("two_state", 2), ("two_state", 3)])
    def test_dense_kkt(self, name, N, rng):
        sys = fixtures.scalar_mjls() if name == "scalar" else fixtures.two_state_mjls()
        prof = compute_profile(sys)
        solver = OcpSolver(OcpSpec(sys, prof, N))
        checked = 0
        for _ in range(25):
            x0 = rng.uniform(-0.5, 0.5, sys.state_dim)
            theta = int(rng.integers(0, 2))
            value, u0, viol = dense_kkt(sys, prof, x0, theta, N)
            assert viol <= 0, "oracle instance should have inactive inequalities"
            pol = solver.solve(x0, theta)
            assert pol.value == pytest.approx(value, abs=1e-6)
            np.testing.assert_allclose(pol.first_input, u0, atol=1e-6)
            checked += 1
        assert checked == 25

    def test_active_constraints_against_nlp(self, scalar_spec, rng):
        solver = OcpSolver(scalar_spec)
        prof = scalar_spec.profile
        active = 0
        for x0 in (2.5, -3.0, 3.5):
            pol = solver.solve([x0], 0)
            value, u0, res = dense_nlp(scalar_spec.system, prof, [x0], 0, 3)
            assert res.success
            assert pol.value == pytest.approx(value, abs=1e-6)
            np.testing.assert_allclose(pol.first_input, u0, atol=1e-5)
            active += np.isclose(np.abs(pol.inputs), 2.0, atol=1e-7).any()
        assert active > 0

    def test_terminal_set_against_nlp(self, scalar_design):
        sys, prof, ing = scalar_design
        spec = OcpSpec(sys, prof, 3, TS, ingredients=ing)
        solver = OcpSolver(spec)
        for x0, th in ((1.0, 0), (-2.0, 1), (3.0, 0)):
            pol = solver.solve([x0], th)
            value, u0, res = dense_nlp(sys, prof, [x0], th, 3, ingredients=ing, terminal_equality=False)
            assert res.success
            assert pol.value == pytest.approx(value, abs=1e-6)
            np.testing.assert_allclose(pol.first_input, u0, atol=1e-5)
            leaves = pol.tree.nodes_at(3)
            assert all(ing.contains(pol.states[n], pol.tree.mode[n], tol=1e-7) for n in leaves)

    def test_terminal_equality_leaves(self, scalar_spec):
        pol = solve(scalar_spec, [1.5], 1)
        tree = pol.tree
        for leaf in tree.nodes_at(3):
            np.testing.assert_allclose(pol.states[leaf], [0.0], atol=1e-8)


class TestSequentialConvexification:
    @pytest.mark.parametrize("formulation", [TE, TS])
    def test_matches_convex_path(self, formulation, scalar_design):
        sys, prof, ing = scalar_design
        spec = OcpSpec(sys, prof, 3, formulation, ingredients=ing)
        opaque = OcpSpec(_opaque(sys), prof, 3, formulation, ingredients=ing)
        a, b = OcpSolver(spec), OcpSolver(opaque)
        assert a.convex and not b.convex
        for x0, th in ((0.8, 0), (-1.7, 1), (2.6, 0)):
            pa, pb = a.solve([x0], th), b.solve([x0], th)
            assert pb.method == "scp"
            assert pb.value == pytest.approx(pa.value, abs=1e-5)
            np.testing.assert_allclose(pb.first_input, pa.first_input, atol=1e-4)

    def test_nonlinear_fixture(self, nonlinear_design):
        sys, prof, ing = nonlinear_design
        spec = OcpSpec(sys, prof, 3, TS, ingredients=ing)
        solver = OcpSolver(spec)
        pol = solver.solve([0.9], 0)
        assert pol.kkt_residual <= 1e-5
        assert solver.constraint_violation([0.9], 0, pol.inputs) <= 1e-7
        # any feasible candidate costs at least as much: perturb the optimum
        rng = np.random.default_rng(0)
        for _ in range(20):
            cand = pol.inputs + 1e-3 * rng.normal(size=pol.inputs.shape)
            if solver.constraint_violation([0.9], 0, cand) <= 0:
                assert solver.evaluate([0.9], 0, cand)[0] >= pol.value - 1e-8

    def test_nonlinear_infeasible(self, nonlinear_design):
        sys, prof, ing = nonlinear_design
        spec = OcpSpec(sys, prof, 1, TS, ingredients=ing)
        with pytest.raises(SolverError):
            solve(spec, [2.0], 0)


@pytest.fixture(scope="module", params=["scalar", "two_state"])
def economic(request):
    if request.param == "scalar":
        sys, storage, prof, ing = request.getfixturevalue("economic_design")
    else:
        sys, storage, prof, ing = request.getfixturevalue("two_state_economic_design")
    return sys, storage, prof, ing


class TestRotation:
    @pytest.mark.parametrize("formulation", [TE, TS])
    def test_minimizer_equivalence(self, economic, formulation):
        sys, storage, prof, ing = economic
        spec = OcpSpec(sys, prof, 3, formulation, storage=storage, ingredients=ing)
        plain, rot = OcpSolver(spec), OcpSolver(spec.with_rotation(True))
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = rng.uniform(-0.8, 0.8, sys.state_dim)
            th = int(rng.integers(0, 2))
            a, b = plain.solve(x, th), rot.solve(x, th)
            np.testing.assert_allclose(b.first_input, a.first_input, atol=1e-6)
            assert b.value - a.value == pytest.approx(rotated_value_offset(spec, x, th), abs=1e-6)

    def test_offset_zero_storage(self, scalar_spec):
        zero = StorageFunction.zero(2, 1, 0.0)
        spec = OcpSpec(scalar_spec.system, scalar_spec.profile, 3, storage=zero)
        assert rotated_value_offset(spec, [1.3], 0) == 0.0

    def test_offset_linear_storage(self):
        # lambda(x) = x and lambda_s = 0
        sys, storage = fixtures.scalar_economic()
        spec = OcpSpec(sys, compute_profile(sys), 3, storage=storage)
        assert rotated_value_offset(spec, [-0.4], 1) == pytest.approx(-0.4)


class TestDrift:
    def test_unrotated_bound(self, scalar_spec, rng):
        solver = OcpSolver(scalar_spec)
        ells = [ell_N(scalar_spec.system.chain, scalar_spec.profile, 3, i) for i in range(2)]
        worst = np.inf
        for _ in range(100):
            x = rng.uniform(-1.0, 1.0, 1)
            d = lyapunov_drift_sample(scalar_spec, x, int(rng.integers(0, 2)), solver, ells)
            worst = min(worst, d.slack)
        assert worst >= -1e-6

    def test_at_equilibrium(self, scalar_spec):
        d = lyapunov_drift_sample(scalar_spec, [0.0], 0)
        assert d.drift == pytest.approx(0.0, abs=1e-10)
        assert d.slack >= -1e-10

    def test_rotated_bound(self):
        sys, storage = fixtures.scalar_economic()
        spec = OcpSpec(sys, compute_profile(sys), 3, storage=storage, rotated=True)
        solver = OcpSolver(spec)
        rng = np.random.default_rng(5)
        for _ in range(50):
            x = rng.uniform(-1.0, 1.0, 1)
            d = lyapunov_drift_sample(spec, x, int(rng.integers(0, 2)), solver)
            assert d.slack >= -1e-6
            assert d.bound == pytest.approx(-0.5 * x[0] ** 2)


class TestShiftPolicy:
    @pytest.mark.parametrize("formulation", [TE, TS])
    def test_shifted_candidate_feasible_and_bounding(self, scalar_design, formulation):
        sys, prof, ing = scalar_design
        spec = OcpSpec(sys, prof, 3, formulation, ingredients=ing)
        solver = OcpSolver(spec)
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.uniform(-1.0, 1.0, 1)
            th = int(rng.integers(0, 2))
            pol = solver.solve(x, th)
            x_next = sys.step(x, pol.first_input, th)
            for j in sys.chain.cover(th):
                cand = shift_policy(spec, pol, solver.tree(j))
                assert solver.constraint_violation(x_next, j, cand) <= 1e-8
                assert solver.evaluate(x_next, j, cand)[0] >= solver.solve(x_next, j).value - 1e-8
