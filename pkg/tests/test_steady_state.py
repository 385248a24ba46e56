import numpy as np
import pytest

from markov_empc import fixtures
from markov_empc.errors import ControllabilityError, SteadyStateError
from markov_empc.markov_chain import MarkovChain
from markov_empc.steady_state import compute_profile, needed_pairs, solve_bridging_law, solve_steady_state
from markov_empc.system import ConstraintSet, QuadraticCost, SwitchingSystem


def _scalar_system(a, b, costs, P=((0.9, 0.1), (0.5, 0.5)), box=10.0):
    chain = MarkovChain(np.array(P))
    Y = ConstraintSet.box([-box], [box], [-box], [box])
    return SwitchingSystem.linear(chain, [np.array([[ai]]) for ai in a], [np.array([[bi]]) for bi in b],
                                  costs, [Y] * len(a))


def _tracking(r):
    return QuadraticCost(np.eye(2), np.array([-2.0 * r, 0.0]), r * r, state_dim=1)


def _as_callables(sys):
    """Same system with opaque dynamics and costs, forcing the nonlinear path."""
    dyn = tuple((lambda x, u, f=f: f(x, u)) for f in sys.dynamics)
    costs = tuple((lambda x, u, c=c: c(x, u)) for c in sys.costs)
    return SwitchingSystem(sys.chain, dyn, costs, sys.constraints, sys.state_dim, sys.input_dim)


class TestSteadyState:
    def test_hand_solution(self):
        # x = 0.5 x + u, cost (x - 2)^2 + u^2: u = x/2, minimizer x = 1.6
        sys = _scalar_system((0.5, 0.5), (1.0, 1.0), [_tracking(2.0)] * 2)
        x, u, ell = solve_steady_state(sys, 0)
        assert x[0] == pytest.approx(1.6, abs=1e-8)
        assert u[0] == pytest.approx(0.8, abs=1e-8)
        assert ell == pytest.approx(0.8, abs=1e-8)

    def test_integrator_without_input(self):
        sys = _scalar_system((1.0, 1.0), (0.0, 0.0), [_tracking(1.0)] * 2)
        x, u, ell = solve_steady_state(sys, 0)
        assert x[0] == pytest.approx(1.0, abs=1e-8)
        assert u[0] == pytest.approx(0.0, abs=1e-8)
        assert ell == pytest.approx(0.0, abs=1e-12)

    def test_residual_and_membership(self):
        sys = fixtures.scalar_mode_dependent()
        prof = compute_profile(sys)
        for i in range(2):
            assert np.abs(sys.step(prof.x_s[i], prof.u_s[i], i) - prof.x_s[i]).max() <= 1e-8
            assert sys.constraints[i].contains(prof.x_s[i], prof.u_s[i])

    def test_nonlinear_route_matches_qp(self):
        sys = fixtures.scalar_mode_dependent()
        opaque = _as_callables(sys)
        for i in range(2):
            xq, uq, lq = solve_steady_state(sys, i)
            xn, un, ln = solve_steady_state(opaque, i)
            assert ln == pytest.approx(lq, abs=1e-7)
            np.testing.assert_allclose(xn, xq, atol=1e-5)
            np.testing.assert_allclose(un, uq, atol=1e-5)

    def test_no_fixed_point_in_box(self):
        # x = x + 1 has no fixed point
        chain = fixtures.scalar_chain()
        Y = ConstraintSet.box([-1], [1], [-1], [1])
        sys = SwitchingSystem.linear(chain, [np.eye(1)] * 2, [np.zeros((1, 1))] * 2,
                                     [QuadraticCost(np.eye(2), state_dim=1)] * 2, [Y] * 2,
                                     offsets=[np.ones(1)] * 2)
        with pytest.raises(SteadyStateError):
            solve_steady_state(sys, 0)

    def test_common_equilibrium_flag(self, scalar_design):
        _, prof, _ = scalar_design
        assert prof.common_equilibrium
        np.testing.assert_allclose(prof.common_state, [0.0], atol=1e-12)
        assert prof.common_cost == pytest.approx(0.0, abs=1e-12)
        md = compute_profile(fixtures.scalar_mode_dependent())
        assert not md.common_equilibrium
        with pytest.raises(SteadyStateError):
            md.common_state


class TestBridging:
    def test_bridging_lands_on_target(self):
        sys = fixtures.scalar_mode_dependent()
        prof = compute_profile(sys)
        for i, j in needed_pairs(sys.chain):
            u = prof.bridging[i, j]
            target = prof.x_s[sys.chain.bet(j)]
            np.testing.assert_allclose(sys.step(prof.x_s[i], u, j), target, atol=1e-8)
            assert prof.bridge_cost[i, j] == pytest.approx(sys.stage_cost(prof.x_s[i], u, j))

    def test_hand_bridging(self):
        # best successor of both modes is mode 0 for this chain
        sys = fixtures.scalar_mode_dependent()
        prof = compute_profile(sys)
        assert prof.bet == (0, 0)
        # from x_s[1] in mode 0 (a = 1.2, b = 1) reach x_s[0]
        expected = prof.x_s[0][0] - 1.2 * prof.x_s[1][0]
        assert prof.bridging[1, 0][0] == pytest.approx(expected, abs=1e-9)
        # the pair (1, 1) would need |u| = 3.3 > 2 and is never used, so it is left empty
        assert (1, 1) not in needed_pairs(sys.chain)
        assert np.isnan(prof.bridging[1, 1]).all()

    def test_uncontrollable_pair_raises(self):
        # x+ = x cannot move between distinct steady states; the chain makes
        # bet(1) = 1 while mode 1 is entered from mode 0, so pair (0, 1) is needed
        P = ((0.5, 0.5, 0.0), (0.0, 0.5, 0.5), (0.5, 0.0, 0.5))
        sys = _scalar_system((1.0,) * 3, (0.0,) * 3, [_tracking(r) for r in (1.0, -1.0, 2.0)], P=P)
        assert (0, 1) in needed_pairs(sys.chain)
        with pytest.raises(ControllabilityError):
            compute_profile(sys)
        with pytest.raises(ControllabilityError):
            solve_bridging_law(sys, (np.array([[1.0], [-1.0]]), np.zeros((2, 1))), 1, 0)

    def test_common_equilibrium_bridging_is_steady_input(self, scalar_design):
        _, prof, _ = scalar_design
        for i in range(2):
            for j in range(2):
                np.testing.assert_allclose(prof.bridging[i, j], prof.u_s[j], atol=1e-9)
