"""Map-induced plans, the split/disintegrate/mix construction, uniqueness.

Two geodesic plans ``pi1`` and ``pi2`` are cut at a grid time ``t``.  The left
halves are grouped by the point they reach at ``t`` and the right halves by the
point they leave from.  Gluing every left half at ``x`` to every right half at
``x`` (with product weights) gives the mixed plan.  When ``pi1`` and ``pi2`` are
pieces of one optimal plan, all glued curves are geodesics and the mixed plan is
optimal again; when they are not, some concatenation breaks constant speed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Optional, Union

from cdk_lab._num import FLOAT_TOL, fsum, is_exact, is_zero
from cdk_lab.branching import BranchPair, find_branching_pairs
from cdk_lab.errors import MixError, PreconditionError, StructuralError
from cdk_lab.geoplans import GeodesicPlan, evaluate_at, lift_plan, time_reverse
from cdk_lab.space import (
    DEFAULT_TOL_GEO,
    DiscreteGeodesic,
    FiniteMMSpace,
    grid_index,
    is_constant_speed,
    number_to_json,
    restrict_geodesic,
)
from cdk_lab.transport import ProbMeasure, TransportPlan, optimal_vertices


def _positive(m) -> bool:
    return m > 0 if is_exact(m) else m > FLOAT_TOL


def _half(m):
    return m / 2 if is_exact(m) else m * 0.5


# -----------------------------------------------------------------------------
# Map-induced test
# -----------------------------------------------------------------------------
@dataclass
class MapVerdict:
    induced: bool
    witness: Any = None  # id of the first source point whose mass splits

    def __bool__(self) -> bool:
        return self.induced


def is_induced_by_map(obj: Union[TransportPlan, GeodesicPlan]) -> MapVerdict:
    """True iff every charged source point carries a single target (plan) or a
    single geodesic (geodesic plan).  Float masses below 1e-12 are ignored."""
    if isinstance(obj, GeodesicPlan):
        items = [(g.start, g.steps) for g, m in obj.atoms if _positive(m)]
    elif isinstance(obj, TransportPlan):
        items = [(i, j) for (i, j), m in obj.coupling.items() if _positive(m)]
    else:
        raise TypeError(f"cannot test {type(obj).__name__} for map-induced structure")
    seen: dict = {}
    for src, dest in sorted(items):
        if seen.setdefault(src, dest) != dest:
            return MapVerdict(False, obj.space.point_ids[src])
    return MapVerdict(True)


# -----------------------------------------------------------------------------
# Half plans and disintegration
# -----------------------------------------------------------------------------
@dataclass
class HalfPlan:
    """Weighted half-geodesics.  ``side`` is ``"left"`` (ending at the anchor
    time) or ``"right"`` (starting there); ``anchor_time`` is that time."""

    atoms: list
    side: str
    anchor_time: Fraction

    def __post_init__(self):
        acc: dict = {}
        geo: dict = {}
        for g, m in self.atoms:
            if is_zero(m):
                continue
            acc[g.steps] = acc[g.steps] + m if g.steps in acc else m
            geo.setdefault(g.steps, g)
        self.atoms = [(geo[k], acc[k]) for k in sorted(acc)]
        if len({g.T for g, _ in self.atoms}) > 1:
            raise StructuralError("half plan atoms have different resolutions")
        total = fsum(m for _, m in self.atoms) if self.atoms else 0
        if not (total == 1 if is_exact(total) else abs(total - 1) <= 1e-12):
            raise ValueError(f"half plan masses sum to {total}")

    def anchor_of(self, g: DiscreteGeodesic) -> int:
        return g.end if self.side == "left" else g.start


@dataclass
class Disintegration:
    """``base`` maps anchor points to mass; ``conditionals`` maps them to
    normalized :class:`HalfPlan` objects."""

    base: dict
    conditionals: dict
    side: str
    anchor_time: Fraction

    def reconstruct(self) -> HalfPlan:
        atoms = []
        for x in sorted(self.base):
            w = self.base[x]
            atoms.extend((g, w * m) for g, m in self.conditionals[x].atoms)
        return HalfPlan(atoms, self.side, self.anchor_time)


def disintegrate(half: HalfPlan) -> Disintegration:
    groups: dict = {}
    for g, m in half.atoms:
        groups.setdefault(half.anchor_of(g), []).append((g, m))
    base, cond = {}, {}
    for x in sorted(groups):
        w = fsum(m for _, m in groups[x])
        base[x] = w
        cond[x] = HalfPlan([(g, m / w) for g, m in groups[x]], half.side, half.anchor_time)
    return Disintegration(base, cond, half.side, half.anchor_time)


def _check_pair(pi1: GeodesicPlan, pi2: GeodesicPlan) -> None:
    if not pi1.space.same_as(pi2.space):
        raise StructuralError("plans live on different spaces")
    if pi1.T != pi2.T:
        raise StructuralError(f"plans have resolutions {pi1.T} and {pi2.T}")


def split_and_disintegrate(pi1: GeodesicPlan, pi2: GeodesicPlan, t):
    """Halve ``(pi1 + pi2) / 2`` at ``t``; disintegrate the left part over its
    end point and the right part over its start point."""
    _check_pair(pi1, pi2)
    k = grid_index(t, pi1.T)
    if not 0 < k < pi1.T:
        raise PreconditionError("split time must lie strictly inside (0, 1)")
    tt = Fraction(k, pi1.T)
    left, right = [], []
    for pi in (pi1, pi2):
        for g, m in pi.atoms:
            left.append((restrict_geodesic(g, 0, tt), _half(m)))
            right.append((restrict_geodesic(g, tt, 1), _half(m)))
    return (
        disintegrate(HalfPlan(left, "left", tt)),
        disintegrate(HalfPlan(right, "right", tt)),
    )


def mix_plans(pi1: GeodesicPlan, pi2: GeodesicPlan, t, tol_geo: float = DEFAULT_TOL_GEO) -> GeodesicPlan:
    """Glue every left half arriving at ``x`` to every right half leaving ``x``.

    Raises :class:`MixError` naming ``(x, left, right)`` (as point ids) as soon
    as a concatenation is not a constant-speed geodesic.
    """
    space = pi1.space
    left, right = split_and_disintegrate(pi1, pi2, t)
    ids = space.point_ids
    atoms = []
    for x in sorted(left.base):
        if x not in right.base:  # cannot happen: both halves share the time-t marginal
            raise StructuralError(f"anchor {ids[x]} has no right half")
        w = left.base[x]
        for gl, ml in left.conditionals[x].atoms:
            for gr, mr in right.conditionals[x].atoms:
                steps = gl.steps + gr.steps[1:]
                if not is_constant_speed(space, steps, tol_geo):
                    raise MixError(
                        ids[x], [ids[p] for p in gl.steps], [ids[p] for p in gr.steps]
                    )
                g = DiscreteGeodesic(steps, space.dist[steps[0], steps[-1]])
                atoms.append((g, w * ml * mr))
    return GeodesicPlan(space, atoms)


# -----------------------------------------------------------------------------
# Length equality at crossings
# -----------------------------------------------------------------------------
@dataclass
class Crossing:
    i: int
    j: int
    t: Fraction
    point: Any  # point id
    lengths: tuple


@dataclass
class LengthReport:
    passed: bool
    violations: list = field(default_factory=list)
    crossings: int = 0

    def __bool__(self) -> bool:
        return self.passed


def verify_length_equality(pi: GeodesicPlan, t=None, tol: float = 1e-9) -> LengthReport:
    """Support geodesics meeting at an interior grid time must have equal length.

    ``t`` restricts the scan to one grid time; by default every interior time
    is scanned.  Atom indices in the report refer to ``pi.atoms``.
    """
    T = pi.T
    ks = [grid_index(t, T)] if t is not None else list(range(1, T))
    geos = pi.geodesics
    ids = pi.space.point_ids
    violations, count = [], 0
    for k in ks:
        by_point: dict = {}
        for idx, g in enumerate(geos):
            by_point.setdefault(g.steps[k], []).append(idx)
        for p, members in sorted(by_point.items()):
            for a in range(len(members)):
                for b in range(a + 1, len(members)):
                    i, j = members[a], members[b]
                    count += 1
                    li, lj = geos[i].length, geos[j].length
                    equal = li == lj if is_exact(li) and is_exact(lj) else abs(float(li) - float(lj)) <= tol
                    if not equal:
                        violations.append(Crossing(i, j, Fraction(k, T), ids[p], (li, lj)))
    return LengthReport(not violations, violations, count)


# -----------------------------------------------------------------------------
# Uniqueness certification
# -----------------------------------------------------------------------------
@dataclass
class BranchWitness:
    pair: tuple  # two geodesics as point-id sequences
    t_branch: Fraction
    reversed: bool  # found in the time reverse of the mixed plan


@dataclass
class UniqueReport:
    verdict: str  # "unique_map" | "unique_not_map" | "non_unique"
    qualifier: str  # "exhaustive" | "partial"
    vertices_found: int
    cost: Any
    map_witness: Any = None
    witness_pair: Optional[tuple] = None  # two optimal TransportPlans
    averaged: Optional[TransportPlan] = None
    crossing_time: Optional[Fraction] = None
    parts: Optional[tuple] = None  # the two mixed pieces (singular parts of the lifts)
    mix: Optional[GeodesicPlan] = None
    branch_witness: Optional[BranchWitness] = None

    @property
    def unique_and_map(self) -> bool:
        return self.verdict == "unique_map"

    def to_dict(self) -> dict:
        out: dict = {
            "verdict": self.verdict,
            "qualifier": self.qualifier,
            "vertices_found": self.vertices_found,
            "cost": number_to_json(self.cost),
        }
        if self.map_witness is not None:
            out["map_witness"] = self.map_witness
        if self.witness_pair is not None:
            out["witness_pair"] = [_coupling_json(p) for p in self.witness_pair]
        if self.crossing_time is not None:
            out["crossing_time"] = number_to_json(self.crossing_time)
        if self.branch_witness is not None:
            bw = self.branch_witness
            out["branch_witness"] = {
                "pair": [list(s) for s in bw.pair],
                "t_branch": number_to_json(bw.t_branch),
                "reversed": bw.reversed,
            }
        return out


def _coupling_json(plan: TransportPlan) -> list:
    ids = plan.space.point_ids
    return [
        {"source": ids[i], "target": ids[j], "mass": number_to_json(m)}
        for (i, j), m in plan.coupling.items()
    ]


def _singular_parts(pi1: GeodesicPlan, pi2: GeodesicPlan):
    """Remove the common part ``min(pi1, pi2)``; the remainders are renormalized."""
    w1 = {g.steps: m for g, m in pi1.atoms}
    w2 = {g.steps: m for g, m in pi2.atoms}
    rest1 = [(g, m - min(m, w2.get(g.steps, 0))) for g, m in pi1.atoms]
    rest2 = [(g, m - min(m, w1.get(g.steps, 0))) for g, m in pi2.atoms]
    out = []
    for rest in (rest1, rest2):
        rest = [(g, m) for g, m in rest if _positive(m)]
        total = fsum(m for _, m in rest)
        out.append(GeodesicPlan(pi1.space, [(g, m / total) for g, m in rest]))
    return out


def _crossing_time(pi1: GeodesicPlan, pi2: GeodesicPlan) -> Optional[Fraction]:
    for k in range(1, pi1.T):
        s1 = set(evaluate_at(pi1, Fraction(k, pi1.T)).support)
        s2 = set(evaluate_at(pi2, Fraction(k, pi2.T)).support)
        if s1 & s2:
            return Fraction(k, pi1.T)
    return None


def _first_branch(pi: GeodesicPlan, reversed_: bool) -> Optional[BranchWitness]:
    rep = find_branching_pairs(pi)
    if not rep.pairs:
        return None
    p: BranchPair = rep.pairs[0]
    ids = pi.space.point_ids
    geos = pi.geodesics
    pair = (tuple(ids[s] for s in geos[p.i].steps), tuple(ids[s] for s in geos[p.j].steps))
    return BranchWitness(pair, p.t_branch, reversed_)


def certify_unique_optimal(
    space: FiniteMMSpace,
    mu0: ProbMeasure,
    mu1: ProbMeasure,
    T: int = 2,
    budget: int = 1000,
    strategy: str = "uniform",
    tol_geo: float = DEFAULT_TOL_GEO,
) -> UniqueReport:
    """Decide whether the optimal plan from ``mu0`` to ``mu1`` is unique and
    induced by a map.

    With two or more optimal vertices the report carries the first two, their
    average (optimal, since cost is linear on the optimal face), and the
    outcome of the mixing pipeline: both vertices are lifted at resolution
    ``T``, their common part is set aside, the rest is mixed at the first grid
    time where the interpolants share a point, and the mixed plan and its time
    reverse are scanned for branching pairs.
    """
    if not mu0.space.same_as(space) or not mu1.space.same_as(space):
        raise StructuralError("measures do not live on the given space")
    scan = optimal_vertices(mu0, mu1, budget=budget)
    qualifier = "exhaustive" if scan.exhaustive else "partial"
    n = len(scan.plans)
    if n == 1:
        mv = is_induced_by_map(scan.plans[0])
        verdict = "unique_map" if mv.induced else "unique_not_map"
        return UniqueReport(verdict, qualifier, n, scan.cost, map_witness=mv.witness)
    v1, v2 = scan.plans[0], scan.plans[1]
    avg: dict = {}
    for plan in (v1, v2):
        for pair, m in plan.coupling.items():
            avg[pair] = avg.get(pair, 0) + _half(m)
    averaged = TransportPlan(mu0, mu1, avg)
    report = UniqueReport("non_unique", qualifier, n, scan.cost, witness_pair=(v1, v2), averaged=averaged)
    if T < 2:
        return report
    p1, p2 = _singular_parts(lift_plan(v1, T, strategy, tol_geo), lift_plan(v2, T, strategy, tol_geo))
    report.parts = (p1, p2)
    t = _crossing_time(p1, p2)
    report.crossing_time = t
    if t is None:
        return report
    mix = mix_plans(p1, p2, t, tol_geo)
    report.mix = mix
    report.branch_witness = _first_branch(mix, False) or _first_branch(time_reverse(mix), True)
    return report
