"""``cdk-lab`` command line.

Every subcommand prints (or writes to ``--out``) a JSON report with sorted keys
and floats at 12 significant digits.  Exit status: 0 when every verdict
passes, 2 when a verdict fails, 1 on malformed input.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from cdk_lab.errors import CdkLabError
from cdk_lab.scenario import (
    Context,
    ScenarioError,
    StepResult,
    bundled_scenarios,
    csv_text,
    dumps_report,
    load_scenario,
    op_branch_scan,
    op_cd_check,
    op_lift,
    op_log2_demo,
    op_mix_demo,
    op_split,
    op_strong_cd,
    op_unique,
    parse_measure,
    op_w2,
    run_scenario,
    write_outputs,
)
from cdk_lab.space import SpaceGenSpec, build_space, load_space, save_space, space_to_dict
from cdk_lab.geoplans import lift_plan
from cdk_lab.transport import plan_from_csv

GLOBAL_DEFAULTS = {"seed": 0, "tol": None, "steps": None, "budget": 1000, "out": None}


def _global_flags() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand without the
    # subparser's defaults clobbering values given to the main parser.
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed (default 0)")
    g.add_argument("--tol", type=float, default=argparse.SUPPRESS, help="verdict tolerance")
    g.add_argument("--steps", type=int, default=argparse.SUPPRESS, help="time resolution T")
    g.add_argument("--budget", type=int, default=argparse.SUPPRESS, help="enumeration budget (default 1000)")
    g.add_argument("--out", default=argparse.SUPPRESS, help="output file (directory for `run`)")
    return g


def _context(args, need_measures: bool = True) -> Context:
    ctx = Context(seed=args.seed, tol=args.tol, budget=args.budget, steps=args.steps)
    if getattr(args, "space", None):
        ctx.space = load_space(args.space)
        for name in ("mu0", "mu1"):
            path = getattr(args, name, None)
            if path:
                ctx.measures[name] = parse_measure(ctx.space, json.loads(Path(path).read_text()))
            elif need_measures:
                raise CdkLabError(f"--{name} is required")
    return ctx


def _emit(args, res: StepResult, extra_csv: bool = False) -> int:
    report = dict(res.result)
    if res.verdict is not None:
        report["passed"] = bool(res.verdict)
    text = dumps_report(report)
    if args.out:
        Path(args.out).write_text(text)
        if extra_csv and res.rows:
            Path(args.out).with_suffix(".csv").write_text(csv_text(res.rows))
    else:
        sys.stdout.write(text)
    return 0 if res.verdict is None or res.verdict else 2


# -----------------------------------------------------------------------------
# Subcommands
# -----------------------------------------------------------------------------
def cmd_gen(args) -> int:
    if args.grid is not None:
        args.kind, args.side = "grid", args.grid
    if args.spec:
        spec = SpaceGenSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        edges = json.loads(args.edges) if args.edges else ()
        spec = SpaceGenSpec(args.kind, side=args.side, step=args.step, norm=args.norm, edges=edges,
                            n_nodes=args.n_nodes)
    space = build_space(spec)
    if args.out:
        save_space(space, args.out)
    else:
        sys.stdout.write(json.dumps(space_to_dict(space), indent=1, sort_keys=True) + "\n")
    return 0


def cmd_w2(args) -> int:
    return _emit(args, op_w2(_context(args), {"oracle": args.oracle}))


def cmd_lift(args) -> int:
    if args.plan:
        ctx = _context(args, need_measures=False)
        plan = plan_from_csv(ctx.space, Path(args.plan).read_text())
        pi = lift_plan(plan, ctx.T({}), args.strategy)
        return _emit(args, StepResult(pi.to_dict()))
    res = op_lift(_context(args), {"strategy": args.strategy})
    return _emit(args, StepResult(res.result["plan"]))


def _plan_param(args) -> dict:
    return json.loads(Path(args.plan).read_text())


def cmd_cd_check(args) -> int:
    ctx = _context(args, need_measures=False)
    return _emit(args, op_cd_check(ctx, {"plan": _plan_param(args), "K": args.K, "windowed": args.windowed}), True)


def cmd_strong_cd(args) -> int:
    params = {"K": args.K}
    if args.samples is not None:
        params["samples"] = args.samples
    return _emit(args, op_strong_cd(_context(args), params), True)


def cmd_branch_scan(args) -> int:
    ctx = _context(args, need_measures=False)
    return _emit(args, op_branch_scan(ctx, {"plan": _plan_param(args)}), True)


def cmd_split(args) -> int:
    params: dict = {"cap": args.cap}
    if args.sigma:
        params["sigma"] = json.loads(Path(args.sigma).read_text())
    else:
        params.update({"trials": args.trials, "n_min": args.n_min, "n_max": args.n_max})
    return _emit(args, op_split(_context(args, need_measures=False), params))


def cmd_log2_demo(args) -> int:
    params = {"t1": args.t1, "t2": args.t2, "family_size": args.family_size, "K": args.K}
    if args.min_slack is not None:
        params["min_slack"] = args.min_slack
    return _emit(args, op_log2_demo(_context(args, need_measures=False), params), True)


def cmd_mix_demo(args) -> int:
    params = {"strategy": args.strategy}
    if args.t is not None:
        params["t"] = args.t
    return _emit(args, op_mix_demo(_context(args), params))


def cmd_unique(args) -> int:
    return _emit(args, op_unique(_context(args), {"strategy": args.strategy}))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CDK_LAB_THREADS", "1")))
    except ValueError:
        return 1


def cmd_run(args) -> int:
    paths = list(args.scenarios) or (bundled_scenarios() if args.bundled else [])
    if not paths:
        print("run: no scenario given (use --bundled for the shipped ones)", file=sys.stderr)
        return 1
    out_dir = Path(args.out or ".")

    def one(path):
        try:
            sc = load_scenario(path)
        except ScenarioError as e:
            return None, e
        return sc, run_scenario(sc, seed=args.seed_override, tol=args.tol, budget=args.budget_override,
                                steps=args.steps)

    with ThreadPoolExecutor(max_workers=min(_threads(), len(paths))) as pool:
        done = list(pool.map(one, paths))
    # a structural error outranks a failed verdict, which outranks success
    rank = {0: 0, 2: 1, 1: 2}
    status = 0
    for sc, outcome in done:
        if sc is None:
            print(f"error: {outcome}", file=sys.stderr)
            status = 1
            continue
        write_outputs(outcome, out_dir, sc.outputs)
        label = {0: "PASS", 2: "FAIL", 1: "ERROR"}[outcome.status]
        print(f"{label} {sc.name}" + (f": {outcome.message}" if outcome.message else ""))
        if rank[outcome.status] > rank[status]:
            status = outcome.status
    return status


# -----------------------------------------------------------------------------
# Parser
# -----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    g = _global_flags()
    parser = argparse.ArgumentParser(prog="cdk-lab", parents=[g],
                                     description="Finite experiments on curvature, transport and branching.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[g], help=help_text)
        p.set_defaults(func=func)
        return p

    def io_args(p, measures=True):
        p.add_argument("--space", required=True, help="space JSON file")
        if measures:
            p.add_argument("--mu0", required=True, help="source measure JSON")
            p.add_argument("--mu1", required=True, help="target measure JSON")

    p = add("gen", cmd_gen, "generate a space file")
    p.add_argument("--spec", help="space spec JSON file (overrides the other flags)")
    p.add_argument("--kind", default="grid", choices=["grid", "graph"])
    p.add_argument("--grid", type=int, help="shorthand for --kind grid --side N")
    p.add_argument("--side", type=int, default=3)
    p.add_argument("--step", default="1/2")
    p.add_argument("--norm", default="inf")
    p.add_argument("--edges", help='JSON edge list, e.g. "[[0,1,1],[1,2,1]]"')
    p.add_argument("--n-nodes", dest="n_nodes", type=int)

    p = add("w2", cmd_w2, "optimal plan and squared W2 distance")
    io_args(p)
    p.add_argument("--oracle", action="store_true", help="compare with vertex enumeration")

    p = add("lift", cmd_lift, "lift a transport plan to a geodesic plan")
    io_args(p, measures=False)
    p.add_argument("--mu0", help="source measure JSON (the optimal plan is lifted)")
    p.add_argument("--mu1", help="target measure JSON")
    p.add_argument("--plan", help="plan CSV (source_id,target_id,mass) to lift instead")
    p.add_argument("--strategy", default="uniform", choices=["uniform", "lex_min"])

    p = add("cd-check", cmd_cd_check, "K-convexity of the entropy along a geodesic plan")
    io_args(p, measures=False)
    p.add_argument("--plan", required=True, help="geodesic plan JSON (from `lift`)")
    p.add_argument("--K", type=float, default=0.0)
    p.add_argument("--windowed", action="store_true", help="worst slack over all time windows")

    p = add("strong-cd", cmd_strong_cd, "K-convexity along every optimal geodesic plan")
    io_args(p)
    p.add_argument("--K", type=float, default=0.0)
    p.add_argument("--samples", type=int, help="random interior plans (default: budget)")

    p = add("branch-scan", cmd_branch_scan, "branching pairs of a geodesic plan")
    io_args(p, measures=False)
    p.add_argument("--plan", required=True)

    p = add("split", cmd_split, "best subset split of zero-diagonal pair measures")
    p.add_argument("--sigma", help="JSON square matrix; random measures when omitted")
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--n-min", dest="n_min", type=int, default=2)
    p.add_argument("--n-max", dest="n_max", type=int, default=10)
    p.add_argument("--cap", type=int, default=20)

    p = add("log2-demo", cmd_log2_demo, "entropy drop of a mixture of two branching families")
    p.add_argument("--t1", default="13/16")
    p.add_argument("--t2", default="7/8")
    p.add_argument("--family-size", dest="family_size", type=int, default=4)
    p.add_argument("--K", type=float, default=0.0)
    p.add_argument("--min-slack", dest="min_slack", type=float)

    p = add("mix-demo", cmd_mix_demo, "mix two optimal geodesic plans at a crossing time")
    io_args(p)
    p.add_argument("--t", help="mixing time (default: first crossing)")
    p.add_argument("--strategy", default="uniform", choices=["uniform", "lex_min"])

    p = add("unique", cmd_unique, "certify uniqueness of the optimal plan")
    io_args(p)
    p.add_argument("--strategy", default="uniform", choices=["uniform", "lex_min"])

    p = add("run", cmd_run, "run scenario files")
    p.add_argument("scenarios", nargs="*", help=".scn files")
    p.add_argument("--bundled", action="store_true", help="run the scenarios shipped with the package")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    explicit = {k for k in GLOBAL_DEFAULTS if hasattr(args, k)}
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    # `run` only overrides a scenario's own seed and budget when asked to.
    args.seed_override = args.seed if "seed" in explicit else None
    args.budget_override = args.budget if "budget" in explicit else None
    try:
        return args.func(args)
    except (CdkLabError, OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
