import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markov_empc.errors import InvalidChainError
from markov_empc.markov_chain import MarkovChain, bet_node, cover, stationary_distribution, validate

P_REF = np.array([[0.9, 0.1], [0.5, 0.5]])


@st.composite
def positive_chains(draw, max_modes=5):
    nu = draw(st.integers(1, max_modes))
    rows = draw(st.lists(st.lists(st.floats(0.01, 1.0), min_size=nu, max_size=nu), min_size=nu, max_size=nu))
    P = np.array(rows)
    return P / P.sum(axis=1, keepdims=True)


class TestCoverAndBet:
    def test_cover_of_explicit_row(self):
        chain = MarkovChain(np.array([[0.5, 0, 0.5], [0.2, 0.5, 0.3], [0.3, 0.3, 0.4]]))
        assert cover(chain, 0) == (0, 2)

    def test_cover_of_absorbing_row(self):
        chain = MarkovChain(np.array([[1.0, 0.0], [0.5, 0.5]]), check_ergodic=False)
        assert chain.cover(0) == (0,)

    def test_cover_reference_chain(self):
        assert MarkovChain(P_REF).cover(1) == (0, 1)

    def test_bet_unique_argmax(self):
        chain = MarkovChain(np.array([[0.2, 0.5, 0.3], [0.2, 0.5, 0.3], [0.2, 0.5, 0.3]]))
        assert bet_node(chain, 0) == 1

    def test_bet_tie_goes_to_lowest_index(self):
        assert MarkovChain(np.array([[0.5, 0.5], [0.5, 0.5]])).bet(0) == 0

    def test_bet_reference_chain(self):
        assert MarkovChain(P_REF).bet(0) == 0

    def test_mode_out_of_range(self):
        chain = MarkovChain(P_REF)
        with pytest.raises(IndexError):
            chain.cover(2)
        with pytest.raises(IndexError):
            chain.bet(-1)

    @given(positive_chains())
    def test_bet_is_a_maximizer_in_cover(self, P):
        chain = MarkovChain(P)
        for i in range(chain.num_modes):
            b = chain.bet(i)
            assert b in chain.cover(i)
            assert all(P[i, b] >= P[i, j] for j in chain.cover(i))


class TestStationary:
    def test_symmetric(self):
        pi = stationary_distribution(MarkovChain(np.full((2, 2), 0.5)))
        np.testing.assert_allclose(pi, [0.5, 0.5], atol=1e-12)

    def test_reference_chain(self):
        # pi_1 = 0.1 pi_0 / 0.5 together with pi_0 + pi_1 = 1
        pi = MarkovChain(P_REF).stationary_distribution()
        np.testing.assert_allclose(pi, [5 / 6, 1 / 6], atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(positive_chains())
    def test_fixed_point(self, P):
        pi = MarkovChain(P).stationary_distribution()
        assert np.abs(pi @ P - pi).max() <= 1e-10
        assert abs(pi.sum() - 1) <= 1e-12
        assert (pi > 0).all()

    def test_independent_of_initial_distribution(self):
        a = MarkovChain(P_REF, [1.0, 0.0]).stationary_distribution()
        b = MarkovChain(P_REF, [0.0, 1.0]).stationary_distribution()
        np.testing.assert_array_equal(a, b)

    def test_power_iteration_converges(self):
        chain = MarkovChain(P_REF, [0.0, 1.0])
        pi = chain.stationary_distribution()
        assert np.abs(chain.distribution_after(200) - pi).max() <= 1e-8

    def test_non_ergodic_chain_has_no_stationary_distribution(self):
        chain = MarkovChain(np.array([[1.0, 0.0], [0.5, 0.5]]), check_ergodic=False)
        with pytest.raises(InvalidChainError):
            chain.stationary_distribution()


class TestValidation:
    def test_reducible(self):
        diag = validate(np.eye(2))
        assert not diag.irreducible
        assert "reducible" in diag.message

    def test_periodic(self):
        diag = validate(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert diag.irreducible and not diag.aperiodic
        assert diag.period == 2

    def test_three_cycle_period(self):
        diag = validate(np.roll(np.eye(3), 1, axis=1))
        assert diag.period == 3

    def test_valid(self):
        assert validate(P_REF).valid

    def test_periodic_construction_rejected(self):
        with pytest.raises(InvalidChainError, match="periodic"):
            MarkovChain(np.array([[0.0, 1.0], [1.0, 0.0]]))

    @pytest.mark.parametrize(
        "P",
        [
            [[0.9, 0.2], [0.5, 0.5]],
            [[1.1, -0.1], [0.5, 0.5]],
            [[0.5, 0.5]],
            [[np.nan, 1.0], [0.5, 0.5]],
        ],
    )
    def test_bad_matrices(self, P):
        with pytest.raises(InvalidChainError):
            MarkovChain(np.array(P))

    def test_bad_initial_distribution(self):
        with pytest.raises(InvalidChainError):
            MarkovChain(P_REF, [0.7, 0.7])

    def test_tiny_entries_are_structural_zeros(self):
        P = np.array([[1 - 1e-15, 1e-15], [0.5, 0.5]])
        assert not validate(P).irreducible

    def test_immutable(self):
        chain = MarkovChain(P_REF)
        with pytest.raises(ValueError):
            chain.transition[0, 0] = 0.5
