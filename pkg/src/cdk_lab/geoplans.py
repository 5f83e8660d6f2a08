"""Probability measures on discrete geodesics.

A :class:`GeodesicPlan` is a finite weighted set of :class:`DiscreteGeodesic`
sharing one time resolution.  Its time marginals ``(e_t)_# plan`` form the
displacement interpolation between the endpoint measures.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence, Union

from cdk_lab._num import fsum, is_exact, is_zero, to_number
from cdk_lab.errors import EmptyRestrictionError, LiftError, StructuralError
from cdk_lab.space import (
    DEFAULT_TOL_GEO,
    DiscreteGeodesic,
    FiniteMMSpace,
    enumerate_geodesics,
    grid_index,
    number_to_json,
    restrict_geodesic,
)
from cdk_lab.transport import MARGINAL_TOL, ProbMeasure, TransportPlan, solve_w2


def _merge(atoms) -> list:
    acc: dict = {}
    geo_of: dict = {}
    for geo, mass in atoms:
        if mass < 0:
            raise ValueError("geodesic plan masses must be nonnegative")
        if is_zero(mass):
            continue
        key = geo.steps
        if key in acc:
            acc[key] = acc[key] + mass
        else:
            acc[key] = mass
            geo_of[key] = geo
    return [(geo_of[k], acc[k]) for k in sorted(acc)]


@dataclass(eq=False)
class GeodesicPlan:
    """Weighted geodesics on ``space``; identical geodesics are merged."""

    space: FiniteMMSpace
    atoms: list

    def __post_init__(self):
        self.atoms = _merge(self.atoms)
        if not self.atoms:
            raise EmptyRestrictionError("geodesic plan has no mass")
        Ts = {g.T for g, _ in self.atoms}
        if len(Ts) != 1:
            raise StructuralError(f"atoms have different resolutions {sorted(Ts)}")
        total = fsum(m for _, m in self.atoms)
        if is_exact(total) and total != 1 or not is_exact(total) and abs(total - 1) > MARGINAL_TOL:
            raise ValueError(f"geodesic plan masses sum to {total}")

    @property
    def T(self) -> int:
        return self.atoms[0][0].T

    @property
    def geodesics(self) -> list:
        return [g for g, _ in self.atoms]

    @property
    def masses(self) -> list:
        return [m for _, m in self.atoms]

    @property
    def source(self) -> ProbMeasure:
        return evaluate_at(self, 0)

    @property
    def target(self) -> ProbMeasure:
        return evaluate_at(self, 1)

    @property
    def cost(self):
        return fsum(m * g.length * g.length for g, m in self.atoms)

    def endpoint_plan(self) -> TransportPlan:
        coupling: dict = {}
        for g, m in self.atoms:
            key = (g.start, g.end)
            coupling[key] = coupling.get(key, 0) + m
        return TransportPlan(self.source, self.target, coupling)

    def times(self) -> list:
        return [Fraction(k, self.T) for k in range(self.T + 1)]

    def to_dict(self) -> dict:
        ids = self.space.point_ids
        return {
            "T": self.T,
            "atoms": [
                {"steps": [ids[p] for p in g.steps], "mass": number_to_json(m)} for g, m in self.atoms
            ],
        }


def plan_from_dict(space: FiniteMMSpace, data: dict) -> GeodesicPlan:
    by_str = {str(pid): i for i, pid in enumerate(space.point_ids)}
    atoms = []
    for a in data["atoms"]:
        steps = tuple(by_str[str(s)] for s in a["steps"])
        if len(steps) != data["T"] + 1:
            raise StructuralError(f"atom {a['steps']} does not have T={data['T']} steps")
        atoms.append((DiscreteGeodesic(steps, space.dist[steps[0], steps[-1]]), to_number(a["mass"])))
    return GeodesicPlan(space, atoms)


def load_geodesic_plan(space: FiniteMMSpace, path) -> GeodesicPlan:
    return plan_from_dict(space, json.loads(Path(path).read_text()))


def _split(mass, parts: int):
    return mass / parts if is_exact(mass) else mass / float(parts)


def lift_plan(
    plan: TransportPlan, T: int, strategy: str = "uniform", tol_geo: float = DEFAULT_TOL_GEO
) -> GeodesicPlan:
    """Spread each coupled pair's mass over its ``T``-step geodesics.

    ``uniform`` splits the mass equally over all geodesics of the pair,
    ``lex_min`` puts it all on the lexicographically least one.
    """
    if strategy not in ("uniform", "lex_min"):
        raise ValueError(f"unknown lift strategy {strategy!r}")
    space = plan.space
    atoms = []
    for (i, j), mass in plan.coupling.items():
        geos = enumerate_geodesics(space, i, j, T, tol_geo)
        if not geos:
            ids = space.point_ids
            raise LiftError((ids[i], ids[j]), f"no {T}-step geodesic from {ids[i]!r} to {ids[j]!r}")
        if strategy == "lex_min":
            atoms.append((geos[0], mass))
        else:
            share = _split(mass, len(geos))
            atoms.extend((g, share) for g in geos)
    return GeodesicPlan(space, atoms)


def evaluate_at(pi: GeodesicPlan, t) -> ProbMeasure:
    """Time marginal ``(e_t)_# pi``."""
    k = grid_index(t, pi.T)
    masses: dict = {}
    for g, m in pi.atoms:
        p = g.steps[k]
        masses[p] = masses.get(p, 0) + m
    return ProbMeasure.from_masses(pi.space, masses)


def restrict_time(pi: GeodesicPlan, s, t) -> GeodesicPlan:
    """Push ``pi`` forward under the restriction of each geodesic to ``[s, t]``."""
    return GeodesicPlan(pi.space, [(restrict_geodesic(g, s, t), m) for g, m in pi.atoms])


def reweight(
    pi: GeodesicPlan, f: Union[Sequence, Mapping, Callable[[DiscreteGeodesic], Any]]
) -> GeodesicPlan:
    """Renormalized ``f * pi``; ``f`` is per-atom (sequence aligned with
    ``pi.atoms``, mapping keyed by geodesic, or callable)."""
    if callable(f):
        factors = [f(g) for g, _ in pi.atoms]
    elif isinstance(f, Mapping):
        factors = [f.get(g, 0) for g, _ in pi.atoms]
    else:
        factors = list(f)
        if len(factors) != len(pi.atoms):
            raise StructuralError(f"{len(factors)} factors for {len(pi.atoms)} atoms")
    factors = [to_number(int(x)) if isinstance(x, bool) else to_number(x) for x in factors]
    if any(x < 0 for x in factors):
        raise ValueError("reweighting factors must be nonnegative")
    weighted = [(g, m * x) for (g, m), x in zip(pi.atoms, factors)]
    total = fsum(m for _, m in weighted)
    if is_zero(total):
        raise EmptyRestrictionError("reweighting keeps zero mass")
    return GeodesicPlan(pi.space, [(g, m / total) for g, m in weighted if not is_zero(m)])


def time_reverse(pi: GeodesicPlan) -> GeodesicPlan:
    return GeodesicPlan(pi.space, [(g.reversed(), m) for g, m in pi.atoms])


@dataclass
class GeodesicCheck:
    passed: bool
    worst: Optional[tuple]  # (s, t)
    worst_slack: float
    w2: float

    def __bool__(self) -> bool:
        return self.passed


def is_wasserstein_geodesic(pi: GeodesicPlan, tol: float = 1e-9) -> GeodesicCheck:
    """Check ``W2(mu_s, mu_t) == |t - s| W2(mu_0, mu_1)`` on all grid pairs.

    Exact inputs are compared through squared distances, so the verdict is
    exact there; the reported slack is always in distance units.
    """
    times = pi.times()
    mus = [evaluate_at(pi, t) for t in times]
    _, full = solve_w2(mus[0], mus[-1])
    full_f = math.sqrt(float(full))
    worst, worst_pair = 0.0, None
    for a in range(len(times)):
        for b in range(a + 1, len(times)):
            _, c = solve_w2(mus[a], mus[b])
            frac = times[b] - times[a]
            if is_exact(c) and is_exact(full) and c == frac * frac * full:
                slack = 0.0
            else:
                slack = abs(math.sqrt(float(c)) - float(frac) * full_f)
            if worst_pair is None or slack > worst:
                worst, worst_pair = slack, (times[a], times[b])
    return GeodesicCheck(worst <= tol, worst_pair, worst, full_f)
