"""Finite, time-homogeneous Markov chains driving the mode of a switching system.

Modes are indexed ``0 .. num_modes - 1`` throughout the package.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from math import gcd

import numpy as np

from .errors import InvalidChainError

#: Transition probabilities below this are treated as structural zeros.
ZERO_TOL = 1e-14
STOCHASTIC_TOL = 1e-12
STATIONARY_TOL = 1e-10
POWER_ITERATION_CAP = 10**6


@dataclass(frozen=True)
class ChainDiagnosis:
    """Outcome of the structural checks in :func:`validate`."""

    irreducible: bool
    aperiodic: bool
    period: int | None
    message: str

    @property
    def valid(self) -> bool:
        return self.irreducible and self.aperiodic


def _support(transition: np.ndarray) -> np.ndarray:
    return transition > ZERO_TOL


def _bfs_levels(adj: np.ndarray, start: int) -> np.ndarray:
    levels = np.full(adj.shape[0], -1, dtype=int)
    levels[start] = 0
    queue = deque([start])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adj[i]):
            if levels[j] < 0:
                levels[j] = levels[i] + 1
                queue.append(j)
    return levels


def validate(transition) -> ChainDiagnosis:
    """Check irreducibility and aperiodicity of a transition matrix.

    Irreducibility is strong connectivity of the digraph ``i -> j`` iff
    ``p_ij > 0``. For an irreducible chain the period is the gcd, over all
    edges ``i -> j``, of ``level(i) + 1 - level(j)`` where ``level`` is the BFS
    depth from any fixed node.
    """
    adj = _support(np.asarray(transition, dtype=float))
    forward = _bfs_levels(adj, 0)
    backward = _bfs_levels(adj.T, 0)
    if (forward < 0).any() or (backward < 0).any():
        return ChainDiagnosis(False, False, None, "reducible: positive-entry graph is not strongly connected")
    period = 0
    for i, j in zip(*np.nonzero(adj)):
        period = gcd(period, int(forward[i] + 1 - forward[j]))
    period = abs(period)
    if period != 1:
        return ChainDiagnosis(True, False, period, f"periodic (period {period})")
    return ChainDiagnosis(True, True, 1, "valid")


@dataclass(frozen=True, eq=False)
class MarkovChain:
    """Transition matrix plus initial distribution.

    Construction validates stochasticity and, unless ``check_ergodic`` is
    False, irreducibility and aperiodicity. The non-ergodic escape hatch exists
    for tree/sampling experiments on absorbing chains; such chains have no
    well-defined stationary distribution.
    """

    transition: np.ndarray
    initial_dist: np.ndarray | None = None
    check_ergodic: bool = True
    diagnosis: ChainDiagnosis = field(init=False)

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
            raise InvalidChainError(f"transition matrix must be square and nonempty, got shape {P.shape}")
        if not np.isfinite(P).all() or (P < 0).any() or (P > 1).any():
            raise InvalidChainError("transition entries must lie in [0, 1]")
        rows = P.sum(axis=1)
        if np.abs(rows - 1.0).max() > STOCHASTIC_TOL:
            raise InvalidChainError(f"transition rows must sum to 1, got {rows}")
        nu = P.shape[0]
        v = np.full(nu, 1.0 / nu) if self.initial_dist is None else np.array(self.initial_dist, dtype=float)
        if v.shape != (nu,) or (v < 0).any() or (v > 1).any() or abs(v.sum() - 1.0) > STOCHASTIC_TOL:
            raise InvalidChainError("initial distribution must be a probability vector of length num_modes")
        diagnosis = validate(P)
        if self.check_ergodic and not diagnosis.valid:
            raise InvalidChainError(f"chain rejected: {diagnosis.message}", diagnosis)
        P.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "initial_dist", v)
        object.__setattr__(self, "diagnosis", diagnosis)

    @property
    def num_modes(self) -> int:
        return self.transition.shape[0]

    def _check_mode(self, i) -> int:
        if not (0 <= int(i) < self.num_modes) or int(i) != i:
            raise IndexError(f"mode {i} out of range 0..{self.num_modes - 1}")
        return int(i)

    def cover(self, i) -> tuple[int, ...]:
        """Successor modes of ``i``: ``{j : p_ij > 0}`` in ascending order."""
        i = self._check_mode(i)
        return tuple(int(j) for j in np.flatnonzero(self.transition[i] > ZERO_TOL))

    def bet(self, i) -> int:
        """Most probable successor of ``i``; ties go to the lowest index."""
        i = self._check_mode(i)
        return int(np.argmax(self.transition[i]))

    def distribution_after(self, k: int, start=None) -> np.ndarray:
        """Mode distribution after ``k`` steps from ``start`` (a mode or a distribution)."""
        if start is None:
            dist = self.initial_dist.copy()
        elif np.ndim(start) == 0:
            dist = np.zeros(self.num_modes)
            dist[self._check_mode(start)] = 1.0
        else:
            dist = np.asarray(start, dtype=float)
        for _ in range(k):
            dist = dist @ self.transition
        return dist

    def stationary_distribution(self) -> np.ndarray:
        return stationary_distribution(self)


def cover(chain: MarkovChain, i) -> tuple[int, ...]:
    return chain.cover(i)


def bet_node(chain: MarkovChain, i) -> int:
    return chain.bet(i)


def _power_iteration(P: np.ndarray, v: np.ndarray, tol: float, cap: int) -> np.ndarray | None:
    pi = v.copy()
    for _ in range(cap):
        nxt = pi @ P
        if np.abs(nxt - pi).max() <= tol:
            return nxt / nxt.sum()
        pi = nxt
    return None


def stationary_distribution(chain: MarkovChain) -> np.ndarray:
    """Limiting distribution ``pi`` with ``pi P = pi`` and ``sum(pi) = 1``.

    A dense solve of the normalized balance equations is tried first; power
    iteration from the initial distribution is the fallback.
    """
    if not chain.diagnosis.valid:
        raise InvalidChainError(f"no unique limiting distribution: {chain.diagnosis.message}", chain.diagnosis)
    P = chain.transition
    nu = chain.num_modes
    system = np.vstack([P.T - np.eye(nu), np.ones((1, nu))])
    rhs = np.zeros(nu + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    if not (np.abs(pi @ P - pi).max() <= STATIONARY_TOL and (pi > 0).all()):
        pi = _power_iteration(P, chain.initial_dist, STATIONARY_TOL * 1e-2, POWER_ITERATION_CAP)
        if pi is None:
            raise InvalidChainError("stationary distribution did not converge; chain is defective")
    pi = pi / pi.sum()
    pi.setflags(write=False)
    return pi
