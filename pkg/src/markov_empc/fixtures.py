"""Small reference problems used by the tests, the CLI samples and the docs."""

from __future__ import annotations

import numpy as np

from .markov_chain import MarkovChain
from .system import (
    ConstraintSet,
    QuadraticCost,
    QuadraticStateDynamics,
    StorageFunction,
    SwitchingSystem,
)

SCALAR_A = (1.2, 0.8)
SCALAR_B = (1.0, 0.5)
SCALAR_P = ((0.9, 0.1), (0.5, 0.5))


def scalar_chain() -> MarkovChain:
    return MarkovChain(np.array(SCALAR_P))


def _scalar_box(x_max=5.0, u_max=2.0):
    return ConstraintSet.box([-x_max], [x_max], [-u_max], [u_max])


def scalar_mjls() -> SwitchingSystem:
    """``x+ = a_i x + b_i u``, cost ``x^2 + u^2``, ``|x| <= 5``, ``|u| <= 2``."""
    chain = scalar_chain()
    costs = [QuadraticCost(np.eye(2), state_dim=1)] * 2
    return SwitchingSystem.linear(
        chain, [np.array([[a]]) for a in SCALAR_A], [np.array([[b]]) for b in SCALAR_B],
        costs, [_scalar_box()] * 2,
    )


def scalar_economic(mu: float = 1.0, offset: float = 0.5, gamma: float = 0.5):
    """Scalar jump system with an economic (non-tracking) cost.

    ``l_i(x, u) = x^2 + u^2 + mu ((a_i - 1) x + b_i u) + offset``. The storage
    ``lambda(x) = mu x`` rotates it into ``x^2 + u^2 + offset``, so the system
    is strictly dissipative with ``rho(x) = gamma x^2`` for any ``gamma <= 1``.
    Returns ``(system, storage)``.
    """
    chain = scalar_chain()
    costs = [
        QuadraticCost(np.eye(2), mu * np.array([a - 1.0, b]), offset, state_dim=1)
        for a, b in zip(SCALAR_A, SCALAR_B)
    ]
    sys = SwitchingSystem.linear(
        chain, [np.array([[a]]) for a in SCALAR_A], [np.array([[b]]) for b in SCALAR_B],
        costs, [_scalar_box()] * 2,
    )
    storage = StorageFunction.affine([np.array([mu])] * 2, [0.0, 0.0], gamma, np.zeros(1))
    return sys, storage


def scalar_mode_dependent(refs=(1.0, -1.0)) -> SwitchingSystem:
    """Tracking costs ``(x - r_i)^2 + u^2`` whose optimal steady states differ by mode."""
    chain = scalar_chain()
    costs = [
        QuadraticCost(np.eye(2), np.array([-2.0 * r, 0.0]), r * r, state_dim=1) for r in refs
    ]
    return SwitchingSystem.linear(
        chain, [np.array([[a]]) for a in SCALAR_A], [np.array([[b]]) for b in SCALAR_B],
        costs, [_scalar_box()] * 2,
    )


TWO_STATE_A = (
    ((1.1, 0.2), (0.0, 0.9)),
    ((0.8, 0.1), (0.1, 1.05)),
)
TWO_STATE_B = (((1.0, 0.0), (0.2, 1.0)), ((0.5, 0.0), (0.1, 1.0)))
TWO_STATE_P = ((0.8, 0.2), (0.3, 0.7))


def two_state_mjls() -> SwitchingSystem:
    """Two states, two inputs (terminal equality needs one-step reachability of x_s)."""
    chain = MarkovChain(np.array(TWO_STATE_P))
    box = ConstraintSet.box([-5.0, -5.0], [5.0, 5.0], [-2.0, -2.0], [2.0, 2.0])
    costs = [QuadraticCost(np.eye(4), state_dim=2)] * 2
    return SwitchingSystem.linear(
        chain, [np.array(A) for A in TWO_STATE_A], [np.array(B) for B in TWO_STATE_B], costs, [box] * 2,
    )


def two_state_economic(mu=(1.0, -0.5), offset: float = 1.0, gamma: float = 0.5):
    """Two-state version of :func:`scalar_economic` with storage ``mu' x``."""
    chain = MarkovChain(np.array(TWO_STATE_P))
    box = ConstraintSet.box([-5.0, -5.0], [5.0, 5.0], [-2.0, -2.0], [2.0, 2.0])
    mu = np.asarray(mu, dtype=float)
    costs = []
    for A, B in zip(TWO_STATE_A, TWO_STATE_B):
        A, B = np.array(A), np.array(B)
        lin = np.concatenate([(A - np.eye(2)).T @ mu, B.T @ mu])
        costs.append(QuadraticCost(np.eye(4), lin, offset, state_dim=2))
    sys = SwitchingSystem.linear(
        chain, [np.array(A) for A in TWO_STATE_A], [np.array(B) for B in TWO_STATE_B], costs, [box] * 2,
    )
    storage = StorageFunction.affine([mu, mu], [0.0, 0.0], gamma, np.zeros(2))
    return sys, storage


def nonlinear_scalar(coef: float = 0.1) -> SwitchingSystem:
    """``x+ = a_i x + b_i u + coef x^2``; smoothness constant ``2 |coef|``."""
    chain = scalar_chain()
    dyn = tuple(QuadraticStateDynamics(np.array([[a]]), np.array([[b]]), coef) for a, b in zip(SCALAR_A, SCALAR_B))
    costs = (QuadraticCost(np.eye(2), state_dim=1),) * 2
    return SwitchingSystem(chain, dyn, costs, (_scalar_box(2.0, 2.0),) * 2, 1, 1)


__all__ = [
    "scalar_chain", "scalar_mjls", "scalar_economic", "scalar_mode_dependent", "two_state_mjls",
    "two_state_economic", "nonlinear_scalar",
]
