"""Command-line front end: ``markov-empc design|solve|simulate|verify``.

Exit codes: 0 success, 2 malformed input, 3 synthesis failure, 4 infeasible
solve, 5 artifact does not match the problem, 6 infeasibility during a
simulation, 7 certificate failure.
"""

from __future__ import annotations

import argparse
import json
import sys as _sys

import numpy as np

from .errors import DesignError, EmpcError, ProblemFileError, SolverError, SteadyStateError
from .ocp import OcpSolver, OcpSpec
from .problem import (
    Problem,
    dump_document,
    ingredients_from_dict,
    load_problem,
    make_artifact,
    parse_artifact,
)
from .simulator import SimulationConfig, run
from .steady_state import compute_profile
from .system import Certificate, check_dissipativity
from .terminal import design_terminal_ingredients, run_certificates

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_SYNTHESIS = 3
EXIT_INFEASIBLE = 4
EXIT_MISMATCH = 5
EXIT_RUN_INFEASIBLE = 6
EXIT_CERTIFICATE = 7


class _Exit(Exception):
    def __init__(self, code, message=""):
        super().__init__(message)
        self.code = code


def _err(msg):
    print(msg, file=_sys.stderr)


def _say(args, msg):
    if not args.quiet:
        print(msg)


def _load(path) -> Problem:
    try:
        return load_problem(path)
    except OSError as exc:
        raise _Exit(EXIT_PARSE, f"cannot read problem file: {exc}") from exc
    except ProblemFileError as exc:
        raise _Exit(EXIT_PARSE, f"problem file error: {exc}") from exc


def _load_artifact(path, problem: Problem) -> dict:
    try:
        with open(path) as fh:
            art = parse_artifact(fh.read())
    except OSError as exc:
        raise _Exit(EXIT_PARSE, f"cannot read artifact: {exc}") from exc
    except ProblemFileError as exc:
        raise _Exit(EXIT_PARSE, f"artifact error: {exc}") from exc
    if art["problem_sha256"] != problem.sha256:
        raise _Exit(EXIT_MISMATCH, "artifact was designed for a different problem "
                                   f"(artifact {art['problem_sha256'][:12]}, problem {problem.sha256[:12]})")
    return art


def _profile(problem: Problem):
    try:
        return compute_profile(problem.system)
    except SteadyStateError as exc:
        raise _Exit(EXIT_SYNTHESIS, f"steady-state computation failed: {exc}") from exc


def _spec(problem: Problem, art: dict) -> OcpSpec:
    profile = _profile(problem)
    ing = ingredients_from_dict(art["ingredients"]) if art.get("ingredients") else None
    if problem.formulation == "terminal_set" and ing is None:
        raise _Exit(EXIT_MISMATCH, "artifact has no terminal ingredients but the problem uses the terminal set")
    try:
        return OcpSpec(problem.system, profile, problem.horizon, problem.formulation, problem.rotated,
                       problem.storage, ing)
    except (ValueError, EmpcError) as exc:
        raise _Exit(EXIT_PARSE, f"inconsistent problem: {exc}") from exc


def _dissipativity(problem: Problem, profile):
    if problem.storage is None or not profile.common_equilibrium:
        return []
    xs = profile.common_state
    extra = [np.concatenate([xs, u]) for u in profile.u_s]
    return [check_dissipativity(problem.system, problem.storage, profile.common_cost,
                                sample_budget=int(problem.design["sample_budget"]), extra_points=extra)]


def _print_certificates(args, certs):
    for c in certs:
        _say(args, f"  {'PASS' if c.passed else 'FAIL'}  {c.name:28s} worst {c.worst: .3e}  tol {c.tol:.1e}")


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


# ----------------------------------------------------------------------------
# commands


def cmd_design(args) -> int:
    problem = _load(args.problem)
    profile = _profile(problem)
    ing = None
    certs = list(_dissipativity(problem, profile))
    if problem.formulation == "terminal_set":
        d = problem.design
        try:
            ing = design_terminal_ingredients(problem.system, profile, d["delta_cap"], d["budget"], problem.storage,
                                              int(d["sample_budget"]))
        except DesignError as exc:
            _err(f"design failed: {exc}")
            _err(json.dumps(_jsonable(exc.diagnostics), indent=1)[:4000])
            raise _Exit(EXIT_SYNTHESIS) from exc
        certs.extend(ing.certificates)
    _print_certificates(args, certs)
    art = make_artifact(problem, profile, ing, certs)
    out = args.out or "artifact.yaml"
    _write(out, dump_document(art))
    _say(args, f"wrote {out}")
    if not all(c.passed for c in certs):
        _err("certificate failure: " + ", ".join(c.name for c in certs if not c.passed))
        return EXIT_SYNTHESIS
    return EXIT_OK


def cmd_solve(args) -> int:
    problem = _load(args.problem)
    art = _load_artifact(args.artifact, problem)
    spec = _spec(problem, art)
    x0 = _state(args.x0, problem, spec)
    theta0 = problem.simulation["theta0"] if args.theta0 is None else args.theta0
    try:
        pol = OcpSolver(spec).solve(x0, theta0)
    except SolverError as exc:
        raise _Exit(EXIT_INFEASIBLE, f"optimal control problem not solved at x0={x0.tolist()}, "
                                     f"theta0={theta0}: {exc}") from exc
    summary = {"value": pol.value, "input": pol.first_input.tolist(), "status": pol.status,
               "method": pol.method, "iterations": pol.iterations, "kkt_residual": pol.kkt_residual,
               "tree_nodes": pol.tree.num_nodes}
    if args.json_summary:
        print(json.dumps(summary))
    else:
        _say(args, f"V_N* = {pol.value:.12g}")
        _say(args, f"kappa_N = {pol.first_input.tolist()}")
        _say(args, f"status {pol.status} ({pol.method}), {pol.iterations} iterations, "
                   f"residual {pol.kkt_residual:.2e}, {pol.tree.num_nodes} tree nodes")
    return EXIT_OK


def _state(arg, problem, spec):
    if arg is not None:
        vals = [float(v) for v in arg.split(",")]
    elif "x0" in problem.simulation:
        vals = problem.simulation["x0"]
    else:
        raise _Exit(EXIT_PARSE, "no initial state: pass --x0 or set simulation.x0")
    if len(vals) != spec.system.state_dim:
        raise _Exit(EXIT_PARSE, f"--x0 needs {spec.system.state_dim} components")
    return np.array(vals)


def cmd_simulate(args) -> int:
    problem = _load(args.problem)
    art = _load_artifact(args.artifact, problem)
    spec = _spec(problem, art)
    sim = problem.simulation
    x0 = _state(args.x0, problem, spec)
    config = SimulationConfig(
        spec, x0, sim["theta0"] if args.theta0 is None else args.theta0,
        steps=args.steps or sim["steps"], trajectories=args.trajectories or sim["trajectories"],
        seed=sim["seed"] if args.seed is None else args.seed, workers=args.workers,
    )
    try:
        report = run(config)
    except SolverError as exc:
        raise _Exit(EXIT_INFEASIBLE, f"initial problem not solvable: {exc}") from exc
    summary = report.summary()
    if args.out:
        _write(args.out, json.dumps(summary, indent=1) if args.out.endswith(".json") else dump_document(summary))
    if args.csv:
        report.write_csv(args.csv)
    if args.json_summary:
        print(json.dumps(summary))
    else:
        label = "l_inf" if report.ell_infinity is not None else "l_s"
        _say(args, f"J_hat = {report.mean_cost:.10g} (SE {report.standard_error:.3g}) vs {label} = "
                   f"{report.bound:.10g}: {'within' if report.bound_satisfied else 'ABOVE'} bound + 2 SE")
        _say(args, f"s_T / s_0 = {report.decay_ratio:.3e}")
    if report.failures:
        for f in report.failures:
            _err(f"infeasible at trajectory {f.trajectory}, k={f.step}, x={f.state.tolist()}, "
                 f"theta={f.mode}: {f.message}")
        return EXIT_RUN_INFEASIBLE
    return EXIT_OK


def cmd_verify(args) -> int:
    problem = _load(args.problem)
    art = _load_artifact(args.artifact, problem)
    profile = _profile(problem)
    certs = list(_dissipativity(problem, profile))
    stored = np.array(art["profile"]["x_s"])
    gap = float(np.abs(stored - profile.x_s).max()) if stored.shape == profile.x_s.shape else np.inf
    certs.append(Certificate("steady_state_match", gap <= 1e-8, gap, 1e-8))
    if art.get("ingredients"):
        ing = ingredients_from_dict(art["ingredients"])
        try:
            certs.extend(run_certificates(problem.system, ing, int(problem.design["sample_budget"]),
                                          problem.storage))
        except (EmpcError, np.linalg.LinAlgError, ValueError) as exc:
            certs.append(Certificate("ingredients_usable", False, np.inf, 0.0, details={"error": str(exc)}))
    _print_certificates(args, certs)
    if args.json_summary:
        print(json.dumps([c.summary() for c in certs]))
    return EXIT_OK if all(c.passed for c in certs) else EXIT_CERTIFICATE


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj if isinstance(obj, (int, float, str, bool, type(None))) else str(obj)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="markov-empc", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output file (artifact or report)")
    common.add_argument("--seed", type=int)
    common.add_argument("--trajectories", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--csv", help="per-step CSV output (simulate)")
    common.add_argument("--json-summary", action="store_true", help="print a machine-readable summary")
    common.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("design", parents=[common], help="compute steady states and terminal ingredients")
    p.add_argument("problem")
    p.set_defaults(func=cmd_design)
    for name, func, helptext in (
        ("solve", cmd_solve, "solve the optimal control problem once"),
        ("simulate", cmd_simulate, "closed-loop Monte Carlo simulation"),
        ("verify", cmd_verify, "re-run all certificates on a design artifact"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("problem")
        p.add_argument("artifact")
        if name in ("solve", "simulate"):
            p.add_argument("--x0", help="comma-separated initial state")
            p.add_argument("--theta0", type=int)
        if name == "simulate":
            p.add_argument("--workers", type=int, default=1)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Exit as exc:
        if str(exc):
            _err(str(exc))
        return exc.code


if __name__ == "__main__":
    raise SystemExit(main())
