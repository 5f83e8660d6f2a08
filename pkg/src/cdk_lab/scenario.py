"""JSON scenarios: a space, named measures and an ordered pipeline of operations.

Schema (every key except ``pipeline`` is optional)::

    {
      "name": "path_unique",
      "seed": 0,
      "space": {"kind": "graph", "n_nodes": 5, "edges": [[0, 1, 1], ...]},
      "measures": {
        "mu0": {"uniform": [0, 1]},
        "mu1": {"weights": {"3": "1/2", "4": "1/2"}},
        "mu2": {"dirac": 2}
      },
      "pipeline": [
        {"op": "unique", "params": {"mu0": "mu0", "mu1": "mu1", "T": 2}},
        {"op": "strong_cd", "params": {...}, "expect": false}
      ],
      "outputs": {"report": "path_unique.json", "csv": "path_unique.csv"}
    }

``space`` may also be ``{"file": "space.json"}`` (relative to the scenario).
Each step yields a result mapping and, for checking operations, a boolean
verdict.  ``expect`` states the verdict the step should produce; a step
passes when its verdict equals ``expect`` (default ``true``).  Steps that
produce a geodesic plan store it under ``as`` (default: the op name) so later
steps can refer to it through a ``plan`` parameter.
"""
from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from cdk_lab.branching import best_split, find_branching_pairs
from cdk_lab.entropy import (
    Log2DemoConfig,
    certify_strong_cd,
    check_k_convexity,
    log2_drop_experiment,
    windowed_k_convexity,
)
from cdk_lab.errors import CdkLabError, SpecError
from cdk_lab.geoplans import (
    GeodesicPlan,
    evaluate_at,
    is_wasserstein_geodesic,
    lift_plan,
    plan_from_dict,
)
from cdk_lab.mixing import certify_unique_optimal, mix_plans, verify_length_equality
from cdk_lab.space import (
    FiniteMMSpace,
    SpaceGenSpec,
    build_space,
    check_metric,
    number_to_json,
    space_from_dict,
)
from cdk_lab.transport import (
    ProbMeasure,
    brute_force_w2,
    check_cyclical_monotonicity,
    measure_from_dict,
    solve_w2,
)

SCENARIO_KEYS = {"name", "seed", "space", "measures", "pipeline", "outputs", "description"}
STEP_KEYS = {"op", "params", "expect", "as"}


class ScenarioError(CdkLabError):
    """A scenario file does not parse or fails validation; carries a line number."""

    def __init__(self, message: str, line: Optional[int] = None, source: str = "<scenario>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


# -----------------------------------------------------------------------------
# Report formatting
# -----------------------------------------------------------------------------
def clean(obj):
    """Convert results to JSON-ready values with floats at 12 significant digits."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, Fraction):
        return clean(float(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return float(format(x, ".12g"))
    return obj


def dumps_report(report: dict) -> str:
    return json.dumps(clean(report), sort_keys=True, indent=1) + "\n"


def csv_text(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "time", "value"])
    for series, t, v in rows:
        w.writerow([series, format(float(t), ".12g"), format(float(v), ".12g")])
    return buf.getvalue()


# -----------------------------------------------------------------------------
# Context and step results
# -----------------------------------------------------------------------------
@dataclass
class Context:
    space: Optional[FiniteMMSpace] = None
    measures: dict = field(default_factory=dict)
    plans: dict = field(default_factory=dict)
    seed: int = 0
    tol: Optional[float] = None
    budget: int = 1000
    steps: Optional[int] = None
    base_dir: Path = Path(".")

    @property
    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def need_space(self) -> FiniteMMSpace:
        if self.space is None:
            raise SpecError("this operation needs a space")
        return self.space

    def measure(self, ref) -> ProbMeasure:
        if isinstance(ref, str) and ref in self.measures:
            return self.measures[ref]
        if isinstance(ref, dict):
            return parse_measure(self.need_space(), ref)
        raise SpecError(f"unknown measure {ref!r}")

    def plan(self, ref) -> GeodesicPlan:
        if isinstance(ref, str) and ref in self.plans:
            return self.plans[ref]
        if isinstance(ref, dict):
            return plan_from_dict(self.need_space(), ref)
        raise SpecError(f"unknown plan {ref!r}")

    def T(self, params: dict, default: int = 2) -> int:
        if "T" in params:
            return int(params["T"])
        return self.steps if self.steps is not None else default


@dataclass
class StepResult:
    result: dict
    verdict: Optional[bool] = None
    rows: list = field(default_factory=list)  # CSV rows (series, time, value)
    plan: Optional[GeodesicPlan] = None


def parse_measure(space: FiniteMMSpace, spec) -> ProbMeasure:
    """``{"uniform": [ids]}``, ``{"dirac": id}`` or ``{"weights": {id: w}}``."""
    by_str = {str(pid): i for i, pid in enumerate(space.point_ids)}

    def idx(pid):
        if str(pid) not in by_str:
            raise SpecError(f"unknown point id {pid!r}")
        return by_str[str(pid)]

    if isinstance(spec, dict) and "uniform" in spec:
        return ProbMeasure.uniform(space, [idx(p) for p in spec["uniform"]])
    if isinstance(spec, dict) and "dirac" in spec:
        return ProbMeasure.dirac(space, idx(spec["dirac"]))
    try:
        return measure_from_dict(space, spec)
    except KeyError as e:
        raise SpecError(str(e)) from None


def _plan_json(plan) -> list:
    ids = plan.space.point_ids
    return [{"source": ids[i], "target": ids[j], "mass": number_to_json(m)} for (i, j), m in plan.coupling.items()]


def _cd_rows(name: str, rep) -> list:
    return [(name, t, e) for t, e in zip(rep.times, rep.entropies)]


# -----------------------------------------------------------------------------
# Operations
# -----------------------------------------------------------------------------
def op_metric_check(ctx: Context, p: dict) -> StepResult:
    rep = check_metric(ctx.need_space(), p.get("tol", ctx.tol))
    viol = [{"axiom": v.axiom, "witness": list(v.witness), "excess": float(v.excess)} for v in rep.violations]
    return StepResult({"n": ctx.space.n, "violations": viol}, rep.valid)


def op_w2(ctx: Context, p: dict) -> StepResult:
    mu0, mu1 = ctx.measure(p.get("mu0", "mu0")), ctx.measure(p.get("mu1", "mu1"))
    plan, cost = solve_w2(mu0, mu1)
    mono = check_cyclical_monotonicity(plan, max_len=int(p.get("max_cycle", 3)))
    out = {"w2_squared": cost, "w2_squared_exact": number_to_json(cost), "plan": _plan_json(plan),
           "cyclically_monotone": mono.passed}
    verdict = mono.passed
    if p.get("oracle"):
        ref = brute_force_w2(mu0, mu1, cap=int(p.get("cap", 8)))
        agree = cost == ref if plan.exact and isinstance(ref, Fraction) else abs(float(cost) - float(ref)) <= 1e-9
        out["oracle"] = number_to_json(ref)
        verdict = verdict and agree
    return StepResult(out, verdict)


def op_lift(ctx: Context, p: dict) -> StepResult:
    mu0, mu1 = ctx.measure(p.get("mu0", "mu0")), ctx.measure(p.get("mu1", "mu1"))
    plan, _ = solve_w2(mu0, mu1)
    pi = lift_plan(plan, ctx.T(p), p.get("strategy", "uniform"))
    return StepResult({"plan": pi.to_dict()}, plan=pi)


def op_wasserstein_geodesic(ctx: Context, p: dict) -> StepResult:
    pi = ctx.plan(p.get("plan", "lift"))
    rep = is_wasserstein_geodesic(pi, p.get("tol", ctx.tol or 1e-9))
    return StepResult({"worst_slack": rep.worst_slack, "w2": rep.w2,
                       "worst_pair": list(rep.worst) if rep.worst else None}, rep.passed)


def op_cd_check(ctx: Context, p: dict) -> StepResult:
    pi = ctx.plan(p.get("plan", "lift"))
    K = float(p.get("K", 0.0))
    tol = p.get("tol", ctx.tol or 1e-9)
    if p.get("windowed"):
        rep, window = windowed_k_convexity(pi, K, tol)
        extra = {"window": list(window)}
    else:
        rep, extra = check_k_convexity(pi, K, tol), {}
    out = {"K": K, "times": rep.times, "entropies": rep.entropies, "slacks": rep.slacks,
           "worst_slack": rep.worst_slack, "worst_time": rep.worst_time, **extra}
    return StepResult(out, rep.passed, _cd_rows("entropy", rep))


def op_strong_cd(ctx: Context, p: dict) -> StepResult:
    space = ctx.need_space()
    mu0, mu1 = ctx.measure(p.get("mu0", "mu0")), ctx.measure(p.get("mu1", "mu1"))
    rep = certify_strong_cd(
        space, mu0, mu1, K=float(p.get("K", 0.0)), T=ctx.T(p),
        budget=int(p.get("budget", ctx.budget)), samples=p.get("samples"),
        seed=int(p.get("seed", ctx.seed)), tol_cd=p.get("tol", ctx.tol or 1e-9),
    )
    out = {"qualifier": rep.qualifier, "checked": rep.checked, "worst_slack": rep.worst_slack,
           "optimal_vertices": rep.optimal_vertices, "passed": rep.passed}
    rows = []
    if not rep.passed and rep.witness is not None:
        out["witness"] = rep.witness.to_dict()
        rows = _cd_rows("witness_entropy", rep.witness_report)
    return StepResult(out, rep.passed, rows, plan=rep.witness)


def op_branch_scan(ctx: Context, p: dict) -> StepResult:
    rep = find_branching_pairs(ctx.plan(p.get("plan", "lift")))
    rows = [("agreement", t, f) for t, f in zip(rep.profile.times, rep.profile.values)] if rep.profile else []
    return StepResult(rep.to_dict(), rep.essentially_nonbranching, rows)


def _random_sigma(rng: np.random.Generator, n: int) -> np.ndarray:
    mat = rng.random((n, n))
    np.fill_diagonal(mat, 0.0)
    return mat / mat.sum()


def op_split(ctx: Context, p: dict) -> StepResult:
    rng = np.random.default_rng(int(p.get("seed", ctx.seed)))
    if "sigma" in p:
        sigmas = [np.asarray(p["sigma"], dtype=float)]
    else:
        lo, hi = int(p.get("n_min", 2)), int(p.get("n_max", 10))
        sigmas = [_random_sigma(rng, int(rng.integers(lo, hi + 1))) for _ in range(int(p.get("trials", 1)))]
    worst_margin, ok, cases = math.inf, True, []
    for sigma in sigmas:
        res = best_split(sigma, cap=int(p.get("cap", 20)))
        margin = float(res.value) - res.bound
        mean_err = abs(res.mean - res.bound)
        ok = ok and margin >= -1e-12 and float(res.value) > 0.25 * float(res.mass) and mean_err <= 1e-12
        worst_margin = min(worst_margin, margin)
        if len(sigmas) == 1:
            cases.append({"n": res.n, "E": list(res.E), "value": float(res.value), "bound": res.bound,
                          "mean": res.mean})
    return StepResult({"trials": len(sigmas), "worst_margin": worst_margin, "cases": cases}, ok)


def op_log2_demo(ctx: Context, p: dict) -> StepResult:
    cfg = Log2DemoConfig(
        t1=Fraction(str(p.get("t1", "13/16"))), t2=Fraction(str(p.get("t2", "7/8"))),
        T=int(p.get("T", ctx.steps or 16)), family_size=int(p.get("family_size", 4)),
        K=float(p.get("K", 0.0)), tol=float(p.get("tol", ctx.tol or 1e-9)),
    )
    rep = log2_drop_experiment(cfg)
    out = rep.to_dict()
    out["drops"] = rep.drops
    min_slack = p.get("min_slack")
    verdict = rep.passed
    if min_slack is not None:
        out["min_slack"] = float(min_slack)
        verdict = verdict and rep.slack >= float(min_slack)
    rows = []
    for name, series in (("ent_up", rep.ent_up), ("ent_down", rep.ent_down), ("ent_mix", rep.ent_mix),
                         ("drop", rep.drops)):
        rows.extend((name, t, v) for t, v in zip(rep.times, series))
    return StepResult(out, verdict, rows, plan=rep.pi_mix)


def op_mix_demo(ctx: Context, p: dict) -> StepResult:
    space = ctx.need_space()
    mu0, mu1 = ctx.measure(p.get("mu0", "mu0")), ctx.measure(p.get("mu1", "mu1"))
    T = ctx.T(p)
    rep = certify_unique_optimal(space, mu0, mu1, T, int(p.get("budget", ctx.budget)), p.get("strategy", "uniform"))
    if rep.parts is None:
        plan, _ = solve_w2(mu0, mu1)
        pi = lift_plan(plan, T, p.get("strategy", "uniform"))
        pi1 = pi2 = pi
        t = Fraction(str(p.get("t", Fraction(1, 2))))
    else:
        pi1, pi2 = rep.parts
        t = Fraction(str(p["t"])) if "t" in p else rep.crossing_time
    if t is None:
        return StepResult({"crossing_time": None, "note": "interpolants never meet"}, True)
    mix = mix_plans(pi1, pi2, t)
    ok = True
    for s in (0, 1):
        half = {}
        for pi in (pi1, pi2):
            for x in evaluate_at(pi, s).support:
                half[x] = half.get(x, 0) + evaluate_at(pi, s)[x] / 2
        ok = ok and evaluate_at(mix, s).equals(ProbMeasure.from_masses(space, half))
    ref = (pi1.cost + pi2.cost) / 2
    cost_err = abs(float(mix.cost) - float(ref))
    ok = ok and cost_err <= 1e-9
    out = {"t": t, "atoms": len(mix.atoms), "cost_mix": mix.cost, "cost_ref": ref, "cost_error": cost_err,
           "marginals_preserved": ok, "mix": mix.to_dict()}
    return StepResult(out, ok, plan=mix)


def op_unique(ctx: Context, p: dict) -> StepResult:
    space = ctx.need_space()
    mu0, mu1 = ctx.measure(p.get("mu0", "mu0")), ctx.measure(p.get("mu1", "mu1"))
    rep = certify_unique_optimal(space, mu0, mu1, ctx.T(p), int(p.get("budget", ctx.budget)),
                                 p.get("strategy", "uniform"))
    return StepResult(rep.to_dict(), rep.unique_and_map, plan=rep.mix)


def op_length_equality(ctx: Context, p: dict) -> StepResult:
    rep = verify_length_equality(ctx.plan(p.get("plan", "lift")), p.get("t"), p.get("tol", ctx.tol or 1e-9))
    viol = [{"i": c.i, "j": c.j, "t": c.t, "point": c.point, "lengths": [float(x) for x in c.lengths]}
            for c in rep.violations]
    return StepResult({"crossings": rep.crossings, "violations": viol}, rep.passed)


OPS: dict[str, Callable[[Context, dict], StepResult]] = {
    "metric_check": op_metric_check,
    "w2": op_w2,
    "lift": op_lift,
    "wasserstein_geodesic": op_wasserstein_geodesic,
    "cd_check": op_cd_check,
    "strong_cd": op_strong_cd,
    "branch_scan": op_branch_scan,
    "split": op_split,
    "log2_demo": op_log2_demo,
    "mix_demo": op_mix_demo,
    "unique": op_unique,
    "length_equality": op_length_equality,
}


# -----------------------------------------------------------------------------
# Scenario parsing and execution
# -----------------------------------------------------------------------------
@dataclass
class Scenario:
    name: str
    pipeline: list
    seed: int = 0
    space: Optional[dict] = None
    measures: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    source: str = "<scenario>"
    text: str = ""
    base_dir: Path = Path(".")

    def line_of(self, pattern: str, occurrence: int = 0) -> Optional[int]:
        """1-based line of the ``occurrence``-th regex match in the source text."""
        found = 0
        for lineno, line in enumerate(self.text.splitlines(), 1):
            if re.search(pattern, line):
                if found == occurrence:
                    return lineno
                found += 1
        return None

    def step_line(self, index: int) -> Optional[int]:
        return self.line_of(r'"op"\s*:', index)


def parse_scenario(text: str, source: str = "<scenario>", base_dir=".") -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(e.msg, e.lineno, source) from None
    probe = Scenario("", [], source=source, text=text)
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object", 1, source)
    extra = set(data) - SCENARIO_KEYS
    if extra:
        key = sorted(extra)[0]
        raise ScenarioError(f"unknown key {key!r}", probe.line_of(f'"{re.escape(key)}"\\s*:'), source)
    pipeline = data.get("pipeline", [])
    if not isinstance(pipeline, list):
        raise ScenarioError("pipeline must be a list", probe.line_of(r'"pipeline"\s*:'), source)
    for k, step in enumerate(pipeline):
        line = probe.step_line(k)
        if not isinstance(step, dict) or "op" not in step:
            raise ScenarioError(f"step {k} has no 'op'", line, source)
        if step["op"] not in OPS:
            raise ScenarioError(f"unknown op {step['op']!r} in step {k}", line, source)
        bad = set(step) - STEP_KEYS
        if bad:
            raise ScenarioError(f"unknown step keys {sorted(bad)} in step {k}", line, source)
        if not isinstance(step.get("params", {}), dict):
            raise ScenarioError(f"params of step {k} must be an object", line, source)
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ScenarioError("seed must be an integer", probe.line_of(r'"seed"\s*:'), source)
    return Scenario(
        name=str(data.get("name", Path(source).stem)),
        pipeline=pipeline,
        seed=seed,
        space=data.get("space"),
        measures=data.get("measures", {}),
        outputs=data.get("outputs", {}),
        source=source,
        text=text,
        base_dir=Path(base_dir),
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ScenarioError(str(e), None, str(path)) from None
    return parse_scenario(text, str(path), path.parent)


def _build_context(sc: Scenario, seed: Optional[int], tol, budget, steps) -> Context:
    ctx = Context(seed=sc.seed if seed is None else seed, tol=tol, budget=budget or 1000, steps=steps,
                  base_dir=sc.base_dir)
    if sc.space is not None:
        try:
            if "file" in sc.space:
                ctx.space = space_from_dict(json.loads((sc.base_dir / sc.space["file"]).read_text()))
            else:
                ctx.space = build_space(SpaceGenSpec.from_dict(sc.space))
        except (CdkLabError, KeyError, TypeError, ValueError, OSError) as e:
            raise ScenarioError(f"space: {e}", sc.line_of(r'"space"\s*:'), sc.source) from None
    for name in sorted(sc.measures):
        try:
            ctx.measures[name] = parse_measure(ctx.need_space(), sc.measures[name])
        except (CdkLabError, ValueError) as e:
            raise ScenarioError(f"measure {name!r}: {e}", sc.line_of(f'"{re.escape(name)}"\\s*:'), sc.source) from None
    return ctx


@dataclass
class ScenarioOutcome:
    name: str
    status: int  # 0 all verdicts pass, 2 some verdict fails, 1 structural error
    report: dict
    csv: str
    message: str = ""


def run_scenario(sc: Scenario, seed: Optional[int] = None, tol=None, budget=None, steps=None) -> ScenarioOutcome:
    """Execute the pipeline; structural failures become status 1 with a message."""
    try:
        ctx = _build_context(sc, seed, tol, budget, steps)
    except ScenarioError as e:
        return ScenarioOutcome(sc.name, 1, {"name": sc.name, "error": str(e)}, csv_text([]), str(e))
    results, rows, all_ok = [], [], True
    for k, step in enumerate(sc.pipeline):
        op = step["op"]
        try:
            res = OPS[op](ctx, dict(step.get("params", {})))
        except (CdkLabError, KeyError, TypeError, ValueError) as e:
            err = ScenarioError(f"step {k} ({op}): {type(e).__name__}: {e}", sc.step_line(k), sc.source)
            return ScenarioOutcome(sc.name, 1, {"name": sc.name, "error": str(err)}, csv_text(rows), str(err))
        if res.plan is not None:
            ctx.plans[step.get("as", op)] = res.plan
        expect = step.get("expect", True)
        entry = {"index": k, "op": op, "result": res.result}
        if res.verdict is not None:
            passed = bool(res.verdict) == bool(expect)
            entry.update({"verdict": bool(res.verdict), "expect": bool(expect), "passed": passed})
            all_ok = all_ok and passed
        results.append(entry)
        rows.extend((f"{k}:{s}", t, v) for s, t, v in res.rows)
    report = {"name": sc.name, "seed": ctx.seed, "steps": results, "passed": all_ok}
    return ScenarioOutcome(sc.name, 0 if all_ok else 2, report, csv_text(rows))


def write_outputs(outcome: ScenarioOutcome, out_dir, outputs: Optional[dict] = None) -> list:
    """Write ``<name>.json`` and ``<name>.csv`` (or the names in ``outputs``)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = outputs or {}
    report_path = out_dir / outputs.get("report", f"{outcome.name}.json")
    csv_path = out_dir / outputs.get("csv", f"{outcome.name}.csv")
    report_path.write_text(dumps_report(outcome.report))
    csv_path.write_text(outcome.csv)
    return [report_path, csv_path]


def bundled_scenarios() -> list:
    """Paths of the scenarios shipped with the package."""
    here = Path(__file__).parent / "scenarios"
    return sorted(here.glob("*.scn"))
