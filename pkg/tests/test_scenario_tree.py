import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markov_empc import fixtures
from markov_empc.errors import TreeTooLargeError
from markov_empc.markov_chain import MarkovChain
from markov_empc.scenario_tree import build_tree, count_nodes, expected_over_stage
from markov_empc.system import StorageFunction, rotated_stage_cost


@st.composite
def chains(draw):
    nu = draw(st.integers(1, 4))
    rows = []
    for _ in range(nu):
        w = np.array(draw(st.lists(st.floats(0.05, 1.0), min_size=nu, max_size=nu)))
        rows.append(w / w.sum())
    return MarkovChain(np.array(rows))


class TestStructure:
    def test_single_mode_is_a_path(self):
        tree = build_tree(MarkovChain(np.array([[1.0]])), 0, 5)
        assert tree.num_nodes == 6
        np.testing.assert_allclose(tree.prob, 1.0)
        assert all(len(tree.children[i]) == 1 for i in range(5))

    def test_stage_two_probabilities(self):
        tree = build_tree(fixtures.scalar_chain(), 0, 2)
        probs = {tuple(int(tree.mode[n]) for n in tree.path_to(n)): tree.prob[n] for n in tree.nodes_at(2)}
        assert probs == pytest.approx({(0, 0, 0): 0.81, (0, 0, 1): 0.09, (0, 1, 0): 0.05, (0, 1, 1): 0.05})

    def test_zero_probability_branches_pruned(self):
        chain = MarkovChain(np.array([[1.0, 0.0], [0.5, 0.5]]), check_ergodic=False)
        tree = build_tree(chain, 0, 3)
        assert tree.num_nodes == 4
        assert set(tree.mode.tolist()) == {0}
        tree = build_tree(chain, 1, 2)
        assert tree.num_nodes == 1 + 2 + 3

    def test_find_and_path(self):
        tree = build_tree(fixtures.scalar_chain(), 1, 3)
        node = tree.find([1, 0, 0, 1])
        assert tree.stage[node] == 3
        assert [int(tree.mode[n]) for n in tree.path_to(node)] == [1, 0, 0, 1]
        assert tree.prob[node] == pytest.approx(0.5 * 0.9 * 0.1)
        with pytest.raises(KeyError):
            tree.find([0, 0])

    def test_too_large(self):
        with pytest.raises(TreeTooLargeError):
            build_tree(fixtures.scalar_chain(), 0, 12, node_cap=1000)

    def test_bad_horizon(self):
        with pytest.raises(ValueError):
            build_tree(fixtures.scalar_chain(), 0, 0)

    @settings(max_examples=40, deadline=None)
    @given(chain=chains(), N=st.integers(1, 4), data=st.data())
    def test_invariants(self, chain, N, data):
        theta0 = data.draw(st.integers(0, chain.num_modes - 1))
        tree = build_tree(chain, theta0, N)
        assert tree.num_nodes == count_nodes(chain, theta0, N)
        for k in range(N + 1):
            assert tree.prob[tree.stage_slices[k]].sum() == pytest.approx(1.0, abs=1e-12)
            # stage marginal equals the chain's k-step distribution
            marg = np.bincount(tree.mode[tree.stage_slices[k]], weights=tree.prob[tree.stage_slices[k]],
                               minlength=chain.num_modes)
            np.testing.assert_allclose(marg, chain.distribution_after(k, theta0), atol=1e-12)
        for node in range(1, tree.num_nodes):
            p = tree.parent[node]
            assert p < node
            assert tree.stage[node] == tree.stage[p] + 1
            assert tree.prob[node] == pytest.approx(tree.prob[p] * tree.cond_prob[node])


class TestExpectations:
    def test_expected_over_stage_array_and_dict(self):
        tree = build_tree(fixtures.scalar_chain(), 0, 2)
        vals = np.arange(4.0)
        assert expected_over_stage(tree, 2, vals) == pytest.approx(0.09 * 1 + 0.05 * 2 + 0.05 * 3)
        as_dict = {n: v for n, v in zip(tree.nodes_at(2), vals)}
        assert tree.expected_over_stage(2, as_dict) == pytest.approx(0.34)
        with pytest.raises(KeyError):
            tree.expected_over_stage(2, {})
        with pytest.raises(KeyError):
            tree.expected_over_stage(2, vals[:3])

    def test_conditional_average(self):
        tree = build_tree(fixtures.scalar_chain(), 0, 1)
        np.testing.assert_allclose(tree.conditional_average(0, [1.0, 3.0]), [0.9 + 0.3])

    def test_rotated_cost_telescopes(self, rng):
        # sum_k E[L(x_k, u_k)] = sum_k E[l(x_k, u_k)] - E[lambda(x_N)] + lambda(x_0)
        sys, _ = fixtures.two_state_economic()
        storage = StorageFunction.quadratic_form(
            [np.diag([0.3, 0.1]), np.array([[0.2, 0.05], [0.05, 0.4]])],
            [np.array([1.0, -0.5]), np.array([0.2, 0.3])], [0.0, 1.0], 0.0, np.zeros(2))
        tree = build_tree(sys.chain, 1, 4)
        x = np.zeros((tree.num_nodes, 2))
        x[0] = rng.uniform(-1, 1, 2)
        u = rng.uniform(-1, 1, (tree.num_decision_nodes, 2))
        for node in range(1, tree.num_nodes):
            p = tree.parent[node]
            x[node] = sys.step(x[p], u[p], tree.mode[p])
        rotated = plain = 0.0
        for node in range(tree.num_decision_nodes):
            th = tree.mode[node]
            rotated += tree.prob[node] * rotated_stage_cost(sys, storage, x[node], u[node], th)
            plain += tree.prob[node] * sys.stage_cost(x[node], u[node], th)
        leaves = tree.nodes_at(tree.horizon)
        terminal = tree.expected_over_stage(tree.horizon, [storage(x[n], tree.mode[n]) for n in leaves])
        assert rotated == pytest.approx(plain - terminal + storage(x[0], tree.mode[0]), abs=1e-10)
