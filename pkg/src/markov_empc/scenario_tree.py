"""Finite-horizon unrolling of a Markov chain into a scenario tree.

Nodes are stored flat in breadth-first order (children by ascending mode), so
stage ``k`` occupies a contiguous index range and every parent precedes its
children. One control decision per non-leaf node encodes causality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TreeTooLargeError
from .markov_chain import MarkovChain

DEFAULT_NODE_CAP = 10**6


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Flat tree storage.

    Attributes:
        stage, mode, parent: per-node integer arrays (parent of the root is -1).
        cond_prob: transition probability from the parent's mode.
        prob: unconditional path probability.
        stage_slices: ``stage_slices[k]`` selects the stage-k nodes.
        children: per-node tuple of child indices.
    """

    horizon: int
    stage: np.ndarray
    mode: np.ndarray
    parent: np.ndarray
    cond_prob: np.ndarray
    prob: np.ndarray
    stage_slices: tuple
    children: tuple

    @property
    def num_nodes(self) -> int:
        return self.stage.size

    @property
    def root_mode(self) -> int:
        return int(self.mode[0])

    def nodes_at(self, k: int) -> range:
        s = self.stage_slices[k]
        return range(s.start, s.stop)

    @property
    def num_decision_nodes(self) -> int:
        """Non-leaf nodes (stages 0..N-1); they are the first indices."""
        return self.stage_slices[self.horizon].start

    def path_to(self, node: int) -> list[int]:
        """Node indices from the root down to ``node``."""
        path = []
        while node >= 0:
            path.append(node)
            node = int(self.parent[node])
        return path[::-1]

    def find(self, modes) -> int:
        """Node reached by following the mode sequence ``modes`` (root mode first)."""
        modes = list(modes)
        if modes[0] != self.root_mode:
            raise KeyError(f"root mode is {self.root_mode}, got {modes[0]}")
        node = 0
        for theta in modes[1:]:
            for c in self.children[node]:
                if self.mode[c] == theta:
                    node = c
                    break
            else:
                raise KeyError(f"mode path {modes} is not in the tree")
        return node

    def expected_over_stage(self, k: int, values) -> float:
        """``sum_node prob[node] * values[node]`` over stage-k nodes.

        ``values`` is either a mapping from node index to value or an array
        holding one value per stage-k node, in node order.
        """
        idx = self.nodes_at(k)
        if isinstance(values, dict):
            missing = [i for i in idx if i not in values]
            if missing:
                raise KeyError(f"missing values for stage-{k} nodes {missing}")
            vals = np.array([values[i] for i in idx], dtype=float)
        else:
            vals = np.asarray(values, dtype=float)
            if vals.shape[0] != len(idx):
                raise KeyError(f"expected {len(idx)} stage-{k} values, got {vals.shape[0]}")
        return float(self.prob[self.stage_slices[k]] @ vals)

    def conditional_average(self, k: int, child_values) -> np.ndarray:
        """Per stage-k node, the probability-weighted mean of stage-(k+1) values."""
        vals = np.asarray(child_values, dtype=float)
        start = self.stage_slices[k + 1].start
        return np.array([
            sum(self.cond_prob[c] * vals[c - start] for c in self.children[i]) for i in self.nodes_at(k)
        ])


def count_nodes(chain: MarkovChain, theta0: int, N: int) -> int:
    """Tree size without building it (mode-count propagation)."""
    support = (chain.transition > 0).astype(np.int64)
    counts = np.zeros(chain.num_modes, dtype=np.int64)
    counts[theta0] = 1
    total = 1
    for _ in range(N):
        counts = counts @ support
        total += int(counts.sum())
    return total


def build_tree(chain: MarkovChain, theta0: int, N: int, node_cap: int = DEFAULT_NODE_CAP) -> ScenarioTree:
    if N < 1:
        raise ValueError(f"horizon must be >= 1, got {N}")
    theta0 = chain._check_mode(theta0)
    total = count_nodes(chain, theta0, N)
    if total > node_cap:
        raise TreeTooLargeError(total, node_cap)
    covers = [chain.cover(i) for i in range(chain.num_modes)]
    P = chain.transition
    stage, mode, parent, cond, prob = [0], [theta0], [-1], [1.0], [1.0]
    children = [[]]
    slices = [slice(0, 1)]
    for k in range(N):
        lo, hi = slices[-1].start, slices[-1].stop
        for node in range(lo, hi):
            i = mode[node]
            for j in covers[i]:
                children[node].append(len(stage))
                stage.append(k + 1)
                mode.append(j)
                parent.append(node)
                cond.append(float(P[i, j]))
                prob.append(prob[node] * float(P[i, j]))
                children.append([])
        slices.append(slice(hi, len(stage)))
    arrays = [np.array(a, dtype=t) for a, t in
              ((stage, int), (mode, int), (parent, int), (cond, float), (prob, float))]
    for a in arrays:
        a.setflags(write=False)
    return ScenarioTree(N, *arrays, tuple(slices), tuple(tuple(c) for c in children))


def expected_over_stage(tree: ScenarioTree, k: int, values) -> float:
    return tree.expected_over_stage(k, values)
