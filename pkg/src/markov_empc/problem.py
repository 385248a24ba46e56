"""Problem and design-artifact documents (YAML).

A problem document has a single top-level ``problem`` mapping::

    problem:
      chain: {transition: [[0.9, 0.1], [0.5, 0.5]], initial: [1.0, 0.0]}
      system:
        type: linear                    # or: fixture (name + params)
        modes:
          - {A: [[1.2]], B: [[1.0]]}
          - {A: [[0.8]], B: [[0.5]], offset: [0.0]}
      costs:                            # l(x, u) = z'Wz + w'z + c, z = (x, u)
        - {W: [[1, 0], [0, 1]], w: [0, 0], c: 0}
        - {W: [[1, 0], [0, 1]]}
      constraints:                      # per mode: box or H z <= h
        - {box: {x_min: [-5], x_max: [5], u_min: [-2], u_max: [2]}}
        - {H: [[1, 0], [-1, 0]], h: [5, 5]}
      storage: {mu: [[1.0], [1.0]], const: [0, 0], gamma: 0.5}   # optional, affine or + Lambda
      smoothness: {beta_f: [0.2, 0.2]}                           # optional
      horizon: 3
      formulation: terminal_set         # or terminal_equality
      rotated: false                    # solve the storage-rotated problem
      design: {delta_cap: 0.5}
      simulation: {x0: [0.5], theta0: 0, steps: 200, trajectories: 100, seed: 7}

A single cost or constraint entry (a mapping instead of a list) is used for
every mode. Matrices are row-major nested lists.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import numpy as np
import yaml

from . import fixtures
from .errors import EmpcError, ProblemFileError
from .markov_chain import MarkovChain
from .system import ConstraintSet, QuadraticCost, Smoothness, StorageFunction, SwitchingSystem
from .terminal import TerminalIngredients

FORMAT_VERSION = 1
FIXTURE_SYSTEMS = {
    "scalar_mjls": fixtures.scalar_mjls,
    "scalar_mode_dependent": fixtures.scalar_mode_dependent,
    "two_state_mjls": fixtures.two_state_mjls,
    "nonlinear_scalar": fixtures.nonlinear_scalar,
    "scalar_economic": fixtures.scalar_economic,
    "two_state_economic": fixtures.two_state_economic,
}
DESIGN_DEFAULTS = {"delta_cap": 0.5, "budget": 0.5, "sample_budget": 10_000}
SIMULATION_DEFAULTS = {"steps": 200, "trajectories": 100, "seed": 0, "theta0": 0}


# ----------------------------------------------------------------------------
# locating fields in the source text


def _node_lines(text: str):
    """Map field paths (tuples) to 1-based line numbers."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    out = {}

    def walk(node, path):
        out[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                walk(v, path + (str(k.value),))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    if root is not None:
        walk(root, ())
    return out


class _Ctx:
    def __init__(self, lines):
        self.lines = lines

    def fail(self, message, path):
        path = tuple(path)
        line = None
        for k in range(len(path), -1, -1):
            if path[:k] in self.lines:
                line = self.lines[path[:k]]
                break
        field = ".".join(str(p) for p in path) if path else None
        raise ProblemFileError(message, field, line)

    def get(self, doc, key, path, required=True, default=None):
        if not isinstance(doc, dict):
            self.fail("expected a mapping", path)
        if key not in doc:
            if required:
                self.fail(f"missing required field '{key}'", path)
            return default
        return doc[key]

    def number(self, value, path):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(f"expected a number, got {value!r}", path)
        if not np.isfinite(value):
            self.fail("number must be finite", path)
        return float(value)

    def vector(self, value, path, size=None):
        if not isinstance(value, list):
            self.fail("expected a list of numbers", path)
        out = [self.number(v, tuple(path) + (i,)) for i, v in enumerate(value)]
        if size is not None and len(out) != size:
            self.fail(f"expected {size} entries, got {len(out)}", path)
        return out

    def matrix(self, value, path, rows=None, cols=None):
        if not isinstance(value, list) or not value:
            self.fail("expected a non-empty list of rows", path)
        out = []
        for i, row in enumerate(value):
            out.append(self.vector(row, tuple(path) + (i,)))
        width = len(out[0])
        for i, row in enumerate(out):
            if len(row) != width:
                self.fail(f"row {i} has {len(row)} entries, expected {width}", tuple(path) + (i,))
        if rows is not None and len(out) != rows:
            self.fail(f"expected {rows} rows, got {len(out)}", path)
        if cols is not None and width != cols:
            self.fail(f"expected {cols} columns, got {width}", path)
        return out


# ----------------------------------------------------------------------------
# problem document


@dataclass(frozen=True, eq=False)
class Problem:
    """Parsed problem: the normalized document plus the objects built from it."""

    document: dict
    system: SwitchingSystem
    storage: StorageFunction | None
    horizon: int
    formulation: str
    rotated: bool
    design: dict
    simulation: dict

    @property
    def sha256(self) -> str:
        return problem_hash(self.document)


def problem_hash(document: dict) -> str:
    canonical = json.dumps(document["problem"], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _per_mode(ctx, value, path, nu, what):
    if isinstance(value, dict):
        return [value] * nu, True
    if not isinstance(value, list):
        ctx.fail(f"{what} must be a mapping or a list with one entry per mode", path)
    if len(value) != nu:
        ctx.fail(f"expected {nu} {what} entries (one per mode), got {len(value)}", path)
    return value, False


def _normalize(doc: dict, ctx: _Ctx) -> dict:
    """Validate and return the canonical form (floats, explicit per-mode lists)."""
    if not isinstance(doc, dict):
        ctx.fail("document must be a mapping with a 'problem' entry", ())
    p = ctx.get(doc, "problem", ())
    base = ("problem",)
    out: dict = {}

    chain = ctx.get(p, "chain", base)
    P = ctx.matrix(ctx.get(chain, "transition", base + ("chain",)), base + ("chain", "transition"))
    nu = len(P)
    if len(P[0]) != nu:
        ctx.fail("transition matrix must be square", base + ("chain", "transition"))
    out["chain"] = {"transition": P}
    if "initial" in chain:
        out["chain"]["initial"] = ctx.vector(chain["initial"], base + ("chain", "initial"), nu)
    if "check_ergodic" in chain:
        out["chain"]["check_ergodic"] = bool(chain["check_ergodic"])

    sysdoc = ctx.get(p, "system", base)
    spath = base + ("system",)
    kind = ctx.get(sysdoc, "type", spath)
    if kind == "linear":
        modes = ctx.get(sysdoc, "modes", spath)
        if not isinstance(modes, list) or len(modes) != nu:
            ctx.fail(f"expected {nu} mode entries", spath + ("modes",))
        norm_modes = []
        n = m = None
        for i, md in enumerate(modes):
            mp = spath + ("modes", i)
            A = ctx.matrix(ctx.get(md, "A", mp), mp + ("A",), n, n)
            n = len(A)
            if len(A[0]) != n:
                ctx.fail("A must be square", mp + ("A",))
            B = ctx.matrix(ctx.get(md, "B", mp), mp + ("B",), n, m)
            m = len(B[0])
            entry = {"A": A, "B": B}
            if "offset" in md:
                entry["offset"] = ctx.vector(md["offset"], mp + ("offset",), n)
            norm_modes.append(entry)
        out["system"] = {"type": "linear", "modes": norm_modes}
    elif kind == "fixture":
        name = ctx.get(sysdoc, "name", spath)
        if name not in FIXTURE_SYSTEMS:
            ctx.fail(f"unknown fixture '{name}' (known: {', '.join(sorted(FIXTURE_SYSTEMS))})", spath + ("name",))
        params = sysdoc.get("params", {}) or {}
        if not isinstance(params, dict):
            ctx.fail("params must be a mapping", spath + ("params",))
        out["system"] = {"type": "fixture", "name": name, "params": copy.deepcopy(params)}
        n = m = None
    else:
        ctx.fail(f"system type must be 'linear' or 'fixture', got {kind!r}", spath + ("type",))

    if kind == "linear":
        d = n + m
        costs, _ = _per_mode(ctx, ctx.get(p, "costs", base), base + ("costs",), nu, "cost")
        norm_costs = []
        for i, c in enumerate(costs):
            cp = base + ("costs", i) if isinstance(p["costs"], list) else base + ("costs",)
            entry = {"W": ctx.matrix(ctx.get(c, "W", cp), cp + ("W",), d, d)}
            entry["w"] = ctx.vector(c["w"], cp + ("w",), d) if "w" in c else [0.0] * d
            entry["c"] = ctx.number(c["c"], cp + ("c",)) if "c" in c else 0.0
            norm_costs.append(entry)
        out["costs"] = norm_costs
        cons, _ = _per_mode(ctx, ctx.get(p, "constraints", base), base + ("constraints",), nu, "constraint")
        norm_cons = []
        for i, c in enumerate(cons):
            cp = base + ("constraints", i) if isinstance(p["constraints"], list) else base + ("constraints",)
            if not isinstance(c, dict):
                ctx.fail("constraint entry must be a mapping", cp)
            if "box" in c:
                bp = cp + ("box",)
                b = c["box"]
                entry = {"box": {
                    "x_min": ctx.vector(ctx.get(b, "x_min", bp), bp + ("x_min",), n),
                    "x_max": ctx.vector(ctx.get(b, "x_max", bp), bp + ("x_max",), n),
                    "u_min": ctx.vector(ctx.get(b, "u_min", bp), bp + ("u_min",), m),
                    "u_max": ctx.vector(ctx.get(b, "u_max", bp), bp + ("u_max",), m),
                }}
            else:
                H = ctx.matrix(ctx.get(c, "H", cp), cp + ("H",), None, d)
                entry = {"H": H, "h": ctx.vector(ctx.get(c, "h", cp), cp + ("h",), len(H))}
            norm_cons.append(entry)
        out["constraints"] = norm_cons

    if p.get("storage") is not None:
        st = p["storage"]
        sp = base + ("storage",)
        entry = {"gamma": ctx.number(ctx.get(st, "gamma", sp), sp + ("gamma",))}
        mus = ctx.get(st, "mu", sp)
        if not isinstance(mus, list) or len(mus) != nu:
            ctx.fail(f"expected {nu} linear coefficient vectors", sp + ("mu",))
        entry["mu"] = [ctx.vector(v, sp + ("mu", i), n) for i, v in enumerate(mus)]
        width = len(entry["mu"][0])
        if "Lambda" in st:
            entry["Lambda"] = [ctx.matrix(v, sp + ("Lambda", i), width, width) for i, v in enumerate(st["Lambda"])]
            if len(entry["Lambda"]) != nu:
                ctx.fail(f"expected {nu} quadratic coefficient matrices", sp + ("Lambda",))
        entry["const"] = ctx.vector(st["const"], sp + ("const",), nu) if "const" in st else [0.0] * nu
        # rho(x) = gamma |x - center|^2
        entry["center"] = ctx.vector(st["center"], sp + ("center",), width) if "center" in st else [0.0] * width
        out["storage"] = entry

    if p.get("smoothness") is not None:
        sm = p["smoothness"]
        entry = {}
        for key in ("beta_f", "beta_l"):
            if key in sm:
                entry[key] = ctx.vector(sm[key], base + ("smoothness", key), nu)
        out["smoothness"] = entry

    horizon = ctx.get(p, "horizon", base)
    if isinstance(horizon, bool) or not isinstance(horizon, int) or horizon < 1:
        ctx.fail("horizon must be a positive integer", base + ("horizon",))
    out["horizon"] = horizon
    form = p.get("formulation", "terminal_equality")
    if form not in ("terminal_equality", "terminal_set"):
        ctx.fail("formulation must be 'terminal_equality' or 'terminal_set'", base + ("formulation",))
    out["formulation"] = form
    rotated = p.get("rotated", False)
    if not isinstance(rotated, bool):
        ctx.fail("rotated must be true or false", base + ("rotated",))
    if rotated and "storage" not in out and not (kind == "fixture" and "economic" in out["system"]["name"]):
        ctx.fail("rotated problems need a storage function", base + ("rotated",))
    out["rotated"] = rotated

    design = dict(DESIGN_DEFAULTS)
    for k, v in (p.get("design") or {}).items():
        if k not in DESIGN_DEFAULTS:
            ctx.fail(f"unknown design setting '{k}'", base + ("design", k))
        design[k] = int(v) if k == "sample_budget" else ctx.number(v, base + ("design", k))
    out["design"] = design

    sim = dict(SIMULATION_DEFAULTS)
    for k, v in (p.get("simulation") or {}).items():
        sp = base + ("simulation", k)
        if k == "x0":
            sim["x0"] = ctx.vector(v, sp, n)
        elif k in SIMULATION_DEFAULTS:
            if isinstance(v, bool) or not isinstance(v, int):
                ctx.fail("expected an integer", sp)
            sim[k] = v
        else:
            ctx.fail(f"unknown simulation setting '{k}'", sp)
    out["simulation"] = sim
    return {"version": FORMAT_VERSION, "problem": out}


def _build(doc: dict, ctx: _Ctx) -> Problem:
    p = doc["problem"]
    base = ("problem",)
    try:
        chain = MarkovChain(np.array(p["chain"]["transition"]), p["chain"].get("initial"),
                            check_ergodic=p["chain"].get("check_ergodic", True))
    except EmpcError as exc:
        ctx.fail(str(exc), base + ("chain", "transition"))
    nu = chain.num_modes
    storage = None
    smooth = Smoothness(**{k: tuple(v) for k, v in p.get("smoothness", {}).items()})
    if p["system"]["type"] == "fixture":
        try:
            built = FIXTURE_SYSTEMS[p["system"]["name"]](**p["system"]["params"])
        except TypeError as exc:
            ctx.fail(f"bad fixture parameters: {exc}", base + ("system", "params"))
        sys, storage = built if isinstance(built, tuple) else (built, None)
        if chain.num_modes != sys.num_modes or not np.allclose(chain.transition, sys.chain.transition):
            sys = SwitchingSystem(chain, sys.dynamics, sys.costs, sys.constraints, sys.state_dim, sys.input_dim,
                                  smooth)
        elif p.get("smoothness"):
            sys = SwitchingSystem(sys.chain, sys.dynamics, sys.costs, sys.constraints, sys.state_dim,
                                  sys.input_dim, smooth)
    else:
        modes = p["system"]["modes"]
        n = len(modes[0]["A"])
        costs = [QuadraticCost(np.array(c["W"]), np.array(c["w"]), c["c"], state_dim=n) for c in p["costs"]]
        cons = []
        for i, c in enumerate(p["constraints"]):
            try:
                if "box" in c:
                    b = c["box"]
                    cons.append(ConstraintSet.box(b["x_min"], b["x_max"], b["u_min"], b["u_max"]))
                else:
                    cons.append(ConstraintSet(np.array(c["H"]), np.array(c["h"]), n))
            except EmpcError as exc:
                ctx.fail(str(exc), base + ("constraints", i))
        try:
            sys = SwitchingSystem.linear(
                chain, [np.array(md["A"]) for md in modes], [np.array(md["B"]) for md in modes], costs, cons,
                [np.array(md["offset"]) if "offset" in md else None for md in modes], smooth,
            )
        except EmpcError as exc:
            ctx.fail(str(exc), base + ("system",))
    if p.get("storage") is not None:
        st = p["storage"]
        n = sys.state_dim
        Lams = [np.array(L) for L in st["Lambda"]] if "Lambda" in st else [np.zeros((n, n))] * nu
        storage = StorageFunction.quadratic_form(Lams, [np.array(v) for v in st["mu"]], st["const"], st["gamma"],
                                                 np.array(st["center"]))
    return Problem(doc, sys, storage, p["horizon"], p["formulation"], p["rotated"], p["design"], p["simulation"])


def parse_problem(text: str) -> Problem:
    ctx = _Ctx(_node_lines(text))
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ProblemFileError(f"YAML syntax error: {exc}", None, mark.line + 1 if mark else None) from exc
    return _build(_normalize(raw, ctx), ctx)


def load_problem(path) -> Problem:
    with open(path) as fh:
        return parse_problem(fh.read())


def dump_document(doc: dict) -> str:
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None, width=120)


# ----------------------------------------------------------------------------
# design artifacts

_ARRAY_FIELDS = ("x_s", "u_s", "K", "P_f", "p", "E", "c", "Z", "Y", "P_I", "P_beta", "gamma", "beta_f",
                 "beta_l", "A", "B")
_SCALAR_FIELDS = ("ell_s", "alpha", "delta", "tau", "budget")


def _tolist(a):
    return np.asarray(a, dtype=float).tolist()


def ingredients_to_dict(ing: TerminalIngredients) -> dict:
    out = {k: _tolist(getattr(ing, k)) for k in _ARRAY_FIELDS}
    out.update({k: float(getattr(ing, k)) for k in _SCALAR_FIELDS})
    out["delta_cap"] = float(ing.diagnostics.get("delta_cap", ing.delta))
    out["smoothness_source"] = list(ing.smoothness_source)
    return out


def ingredients_from_dict(d: dict) -> TerminalIngredients:
    kw = {k: np.array(d[k], dtype=float) for k in _ARRAY_FIELDS}
    kw.update({k: float(d[k]) for k in _SCALAR_FIELDS})
    return TerminalIngredients(**kw, smoothness_source=tuple(d.get("smoothness_source", ())),
                               diagnostics={"delta_cap": float(d.get("delta_cap", d["delta"]))})


def make_artifact(problem: Problem, profile, ingredients: TerminalIngredients | None, certificates) -> dict:
    doc = {
        "version": FORMAT_VERSION,
        "kind": "design-artifact",
        "problem_sha256": problem.sha256,
        "profile": {
            "x_s": _tolist(profile.x_s), "u_s": _tolist(profile.u_s), "ell_s": _tolist(profile.ell_s),
            "bet": list(profile.bet),
        },
        "ingredients": ingredients_to_dict(ingredients) if ingredients is not None else None,
        "certificates": [c.summary() for c in certificates],
    }
    return doc


def parse_artifact(text: str) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ProblemFileError(f"artifact is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("kind") != "design-artifact":
        raise ProblemFileError("not a design artifact", "kind")
    for key in ("problem_sha256", "profile"):
        if key not in doc:
            raise ProblemFileError(f"artifact is missing '{key}'", key)
    if doc.get("ingredients") is not None:
        try:
            ingredients_from_dict(doc["ingredients"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProblemFileError(f"malformed ingredients: {exc}", "ingredients") from exc
    return doc


__all__ = [
    "Problem", "parse_problem", "load_problem", "dump_document", "problem_hash", "make_artifact",
    "parse_artifact", "ingredients_to_dict", "ingredients_from_dict", "FIXTURE_SYSTEMS",
]
