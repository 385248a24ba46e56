"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class EmpcError(Exception):
    """Base class for all errors raised by :mod:`markov_empc`."""


class InvalidChainError(EmpcError, ValueError):
    def __init__(self, message, diagnosis=None):
        super().__init__(message)
        self.diagnosis = diagnosis


class ModelError(EmpcError, ValueError):
    """Inconsistent or defective system data (dimensions, non-finite values...)."""


class SteadyStateError(EmpcError):
    def __init__(self, message, mode=None):
        super().__init__(message)
        self.mode = mode


class ControllabilityError(SteadyStateError):
    """No bridging input exists for some pair of modes."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class TreeTooLargeError(EmpcError):
    def __init__(self, num_nodes, cap):
        super().__init__(
            f"scenario tree would have {num_nodes} nodes (cap {cap}); use a shorter horizon"
        )
        self.num_nodes = num_nodes
        self.cap = cap


class SolverError(EmpcError):
    """A finite-horizon problem could not be solved."""

    def __init__(self, message, status=None, last_iterate=None, certificate=None):
        super().__init__(message)
        self.status = status
        self.last_iterate = last_iterate
        self.certificate = certificate


class InfeasibleError(SolverError):
    pass


class MaxIterationsError(SolverError):
    pass


class NoConvergenceError(SolverError):
    pass


class DesignError(EmpcError):
    """Terminal-ingredient synthesis failed; ``diagnostics`` says why."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class AllTauInfeasibleError(DesignError):
    def __init__(self, margins, hint="gamma may be too large for the requested delta_cap"):
        super().__init__(
            f"AllTauInfeasible: no tau on the search grid gives a feasible LMI ({hint})",
            {"per_tau_margins": margins, "hint": hint},
        )
        self.margins = margins


class ProblemFileError(EmpcError):
    """Malformed problem or artifact document."""

    def __init__(self, message, field=None, line=None):
        loc = ""
        if field is not None:
            loc += f" [field {field}"
            if line is not None:
                loc += f", line {line}"
            loc += "]"
        super().__init__(message + loc)
        self.field = field
        self.line = line
