"""Stochastic economic model predictive control for Markov jump systems."""

from .errors import (
    AllTauInfeasibleError,
    ControllabilityError,
    DesignError,
    EmpcError,
    InfeasibleError,
    InvalidChainError,
    MaxIterationsError,
    ModelError,
    NoConvergenceError,
    ProblemFileError,
    SolverError,
    SteadyStateError,
    TreeTooLargeError,
)
from .markov_chain import MarkovChain
from .scenario_tree import ScenarioTree, build_tree
from .steady_state import SteadyStateProfile, compute_profile
from .system import ConstraintSet, LinearDynamics, QuadraticCost, StorageFunction, SwitchingSystem
from .terminal import TerminalIngredients, design_terminal_ingredients

__version__ = "0.1.0"
