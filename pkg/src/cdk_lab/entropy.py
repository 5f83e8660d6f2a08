"""Relative entropy and K-convexity along geodesic plans.

Entropy is measured in nats.  For ``mu = rho m`` on a finite space,
``Ent(mu) = sum_x m(x) rho(x) log rho(x)`` with ``0 log 0 = 0``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Optional

import numpy as np

from cdk_lab._num import fsum, is_exact, is_zero
from cdk_lab.errors import CdkLabError, LiftError
from cdk_lab.geoplans import GeodesicPlan, evaluate_at, restrict_time
from cdk_lab.space import (
    DiscreteGeodesic,
    FiniteMMSpace,
    enumerate_geodesics,
    grid_index,
    grid_point,
    SpaceGenSpec,
    build_space,
    is_constant_speed,
)
from cdk_lab.transport import ProbMeasure, optimal_vertices, solve_w2

DEFAULT_TOL_CD = 1e-9
LOG2 = math.log(2.0)


class ConstructionError(CdkLabError):
    """The log-2 demo families cannot be realized with the given config."""


@dataclass(frozen=True)
class EntropyValue:
    value: float
    finite: bool = True

    def __float__(self) -> float:
        return self.value


def entropy(mu: ProbMeasure, m=None) -> EntropyValue:
    """Relative entropy of ``mu`` with respect to ``m`` (default: the space's measure)."""
    ref = mu.space.m if m is None else m
    terms = []
    for x in mu.support:
        w, mx = mu.weights[x], ref[x]
        if not mx > 0:
            return EntropyValue(math.inf, False)
        terms.append(float(w) * (math.log(float(w)) - math.log(float(mx))))
    return EntropyValue(math.fsum(terms))


# -----------------------------------------------------------------------------
# K-convexity
# -----------------------------------------------------------------------------
@dataclass
class CDReport:
    """Entropy profile along a plan and its worst K-convexity slack.

    ``slacks[k] = Ent(mu_t) - [(1-t) Ent(mu_0) + t Ent(mu_1) - K/2 t(1-t) W2^2]``
    at ``t = times[k]``; the verdict passes iff the maximum is ``<= tol``.
    """

    K: float
    times: list
    entropies: list
    slacks: list
    w2sq: float
    worst_slack: float
    worst_time: Any
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst_slack <= self.tol

    def __bool__(self) -> bool:
        return self.passed


def _cd_report(ents, times, K, w2sq, tol) -> CDReport:
    e0, e1 = ents[0], ents[-1]
    slacks = []
    for t, e in zip(times, ents):
        tf = float(t)
        bound = (1 - tf) * e0 + tf * e1 - 0.5 * K * tf * (1 - tf) * w2sq
        slacks.append(e - bound)
    k = int(np.argmax(slacks))
    return CDReport(K, list(times), list(ents), slacks, w2sq, slacks[k], times[k], tol)


def check_k_convexity(
    pi: GeodesicPlan, K: float = 0.0, tol_cd: float = DEFAULT_TOL_CD, w2sq=None
) -> CDReport:
    """Evaluate the K-convexity inequality of the entropy along ``(e_t)_# pi``.

    ``W2^2`` between the endpoints comes from :func:`solve_w2` unless given.
    """
    times = pi.times()
    ents = [entropy(evaluate_at(pi, t)).value for t in times]
    if w2sq is None:
        _, w2sq = solve_w2(evaluate_at(pi, 0), evaluate_at(pi, 1))
    return _cd_report(ents, times, K, float(w2sq), tol_cd)


def windowed_k_convexity(pi: GeodesicPlan, K: float = 0.0, tol_cd: float = DEFAULT_TOL_CD):
    """Worst K-convexity report over all restrictions of ``pi`` to grid windows ``[a, b]``.

    Returns ``(report, (a, b))`` for the window with the largest slack.
    """
    best = None
    times = pi.times()
    for a, b in itertools.combinations(times, 2):
        if grid_index(b, pi.T) - grid_index(a, pi.T) < 2:
            continue
        rep = check_k_convexity(restrict_time(pi, a, b), K, tol_cd)
        if best is None or rep.worst_slack > best[0].worst_slack:
            best = (rep, (a, b))
    if best is None:
        return check_k_convexity(pi, K, tol_cd), (times[0], times[-1])
    return best


# -----------------------------------------------------------------------------
# Strong CD certification
# -----------------------------------------------------------------------------
@dataclass
class StrongCDReport:
    passed: bool
    qualifier: str  # "exhaustive" | "sampled"
    checked: int
    worst_slack: float
    witness: Optional[GeodesicPlan]
    witness_report: Optional[CDReport]
    optimal_vertices: int

    def __bool__(self) -> bool:
        return self.passed


def _geodesic_table(space, couplings, T, tol_geo):
    table: dict = {}
    for coupling in couplings:
        for (i, j) in coupling:
            if (i, j) not in table:
                geos = enumerate_geodesics(space, i, j, T, tol_geo)
                if not geos:
                    ids = space.point_ids
                    raise LiftError((ids[i], ids[j]), f"no {T}-step geodesic from {ids[i]!r} to {ids[j]!r}")
                table[(i, j)] = geos
    return table


def certify_strong_cd(
    space: FiniteMMSpace,
    mu0: ProbMeasure,
    mu1: ProbMeasure,
    K: float = 0.0,
    T: int = 2,
    budget: int = 1000,
    samples: Optional[int] = None,
    seed: int = 0,
    tol_cd: float = DEFAULT_TOL_CD,
    tol_geo: float = 1e-9,
) -> StrongCDReport:
    """Check K-convexity along every optimal geodesic plan from ``mu0`` to ``mu1``.

    The candidate plans are the geodesic plans at resolution ``T`` whose
    endpoint coupling is optimal.  Their vertices are "one optimal vertex
    coupling, one geodesic per coupled pair"; they are enumerated up to
    ``budget``.  For a fixed time the slack is a convex function of the plan
    (entropy is convex, the evaluation pushforward is linear, the endpoints
    and ``W2`` are fixed), so its maximum over the polytope sits at a vertex:
    a full vertex scan certifies every plan.  ``samples`` random interior
    plans (default ``budget``) are checked as well.  The scan stops at the
    first violation, which becomes the witness.
    """
    if not mu0.space.same_as(space):
        raise ValueError("measures do not live on the given space")
    scan = optimal_vertices(mu0, mu1, budget=budget)
    w2sq = float(scan.cost)
    table = _geodesic_table(space, [p.coupling for p in scan.plans], T, tol_geo)
    exhaustive = scan.exhaustive
    checked = 0
    worst: Optional[tuple] = None

    def consider(pi):
        nonlocal worst, checked
        rep = check_k_convexity(pi, K, tol_cd, w2sq=w2sq)
        checked += 1
        if worst is None or rep.worst_slack > worst[1].worst_slack:
            worst = (pi, rep)
        return rep.passed

    for plan in scan.plans:
        pairs = list(plan.coupling.items())
        for choice in itertools.product(*(table[pair] for pair, _ in pairs)):
            if checked >= budget:
                exhaustive = False
                break
            pi = GeodesicPlan(space, [(g, m) for g, (_, m) in zip(choice, pairs)])
            if not consider(pi):
                return StrongCDReport(False, "exhaustive" if exhaustive else "sampled", checked,
                                      worst[1].worst_slack, pi, worst[1], len(scan.plans))
        else:
            continue
        break

    rng = np.random.default_rng(seed)
    n_samples = budget if samples is None else samples
    for _ in range(n_samples):
        lam = rng.dirichlet(np.ones(len(scan.plans)))
        atoms = []
        for weight, plan in zip(lam, scan.plans):
            for pair, m in plan.coupling.items():
                geos = table[pair]
                split = rng.dirichlet(np.ones(len(geos)))
                atoms.extend((g, float(weight) * float(m) * float(s)) for g, s in zip(geos, split))
        pi = GeodesicPlan(space, _renormalize(atoms))
        if not consider(pi):
            return StrongCDReport(False, "exhaustive" if exhaustive else "sampled", checked,
                                  worst[1].worst_slack, pi, worst[1], len(scan.plans))

    return StrongCDReport(True, "exhaustive" if exhaustive else "sampled", checked,
                          worst[1].worst_slack if worst else 0.0,
                          worst[0] if worst else None, worst[1] if worst else None, len(scan.plans))


def _renormalize(atoms):
    total = math.fsum(m for _, m in atoms)
    return [(g, m / total) for g, m in atoms if m > 0]


# -----------------------------------------------------------------------------
# Log-2 drop experiment
# -----------------------------------------------------------------------------
@dataclass
class Log2DemoConfig:
    """Two families of geodesics on an l-infinity dyadic grid.

    The grid has step ``1/T`` and ``T + 1`` points per side.  Family member
    ``i`` starts at ``(0, 2i/T)`` and runs horizontally to ``x = 1``; its
    "up" copy equals it up to its branching step and then sits one grid step
    higher.  Branching steps cycle through ``[t1, t2)`` so the two families
    agree on ``[0, t1]`` and are disjoint on ``[t2, 1]``.
    """

    t1: Any = Fraction(13, 16)
    t2: Any = Fraction(7, 8)
    T: int = 16
    family_size: int = 4
    K: float = 0.0
    tol: float = 1e-9

    def validate(self):
        k1, k2 = grid_index(self.t1, self.T), grid_index(self.t2, self.T)
        if not 0 < k1 < k2 < self.T:
            raise ConstructionError(f"need 0 < t1 < t2 < 1 on the 1/{self.T} grid")
        if self.family_size < 1 or 2 * self.family_size - 1 > self.T:
            raise ConstructionError(
                f"family of {self.family_size} does not fit on a grid with {self.T + 1} rows"
            )
        return k1, k2


@dataclass
class Log2Report:
    config: Log2DemoConfig
    times: list
    ent_up: list
    ent_down: list
    ent_mix: list
    drops: list
    drop: float
    drop_error: float
    head_drop: float
    slack: float
    slack_window: tuple
    slack_full: float
    cd_verdict: bool
    pi_up: GeodesicPlan = field(repr=False)
    pi_down: GeodesicPlan = field(repr=False)
    pi_mix: GeodesicPlan = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.drop_error <= self.config.tol and self.head_drop <= self.config.tol

    def to_dict(self) -> dict:
        return {
            "K": self.config.K,
            "t1": float(self.config.t1),
            "t2": float(self.config.t2),
            "T": self.config.T,
            "times": [float(t) for t in self.times],
            "ent_up": self.ent_up,
            "ent_down": self.ent_down,
            "ent_mix": self.ent_mix,
            "drop": self.drop,
            "drop_error": self.drop_error,
            "slack": self.slack,
            "slack_window": [float(w) for w in self.slack_window],
            "slack_full": self.slack_full,
            "cd_verdict": self.cd_verdict,
            "verdict": self.passed,
        }


def log2_families(cfg: Log2DemoConfig):
    """Build the space and the ``(pi_up, pi_down)`` pair for ``cfg``."""
    k1, k2 = cfg.validate()
    T = cfg.T
    h = Fraction(1, T)
    space = build_space(SpaceGenSpec("grid", side=T + 1, step=h, norm="inf"))
    k = cfg.family_size
    up, down = [], []
    for i in range(k):
        y = 2 * i * h
        branch = k1 + i % (k2 - k1)
        d_steps = tuple(grid_point(space, j * h, y) for j in range(T + 1))
        u_steps = tuple(grid_point(space, j * h, y if j <= branch else y + h) for j in range(T + 1))
        for steps in (d_steps, u_steps):
            if not is_constant_speed(space, steps):
                raise ConstructionError(f"constructed sequence {steps} is not a geodesic")
        down.append(DiscreteGeodesic(d_steps, space.dist[d_steps[0], d_steps[-1]]))
        up.append(DiscreteGeodesic(u_steps, space.dist[u_steps[0], u_steps[-1]]))
    w = Fraction(1, k)
    pi_up = GeodesicPlan(space, [(g, w) for g in up])
    pi_down = GeodesicPlan(space, [(g, w) for g in down])
    if restrict_time(pi_up, 0, cfg.t1).atoms != restrict_time(pi_down, 0, cfg.t1).atoms:
        raise ConstructionError("families do not agree up to t1")
    for j in range(k2, T + 1):
        s = Fraction(j, T)
        if set(evaluate_at(pi_up, s).support) & set(evaluate_at(pi_down, s).support):
            raise ConstructionError(f"families overlap at time {s}")
    return space, pi_up, pi_down


def log2_drop_experiment(cfg: Optional[Log2DemoConfig] = None) -> Log2Report:
    """Entropy along two branching families and along their half-half mixture.

    Once the families are mutually singular the mixture's entropy sits exactly
    ``log 2`` below the average of the two; while they coincide there is no
    gap.  The mixture's CD slack is reported as the worst K-convexity slack
    over all time windows of the mixture (restrictions of an optimal geodesic
    plan are again optimal), with the full-interval slack alongside.
    """
    cfg = cfg or Log2DemoConfig()
    k1, k2 = cfg.validate()
    space, pi_up, pi_down = log2_families(cfg)
    half = Fraction(1, 2)
    pi_mix = GeodesicPlan(space, [(g, half * m) for g, m in pi_up.atoms + pi_down.atoms])
    times = pi_mix.times()
    ent = {
        name: [entropy(evaluate_at(p, t)).value for t in times]
        for name, p in (("up", pi_up), ("down", pi_down), ("mix", pi_mix))
    }
    drops = [0.5 * u + 0.5 * d - x for u, d, x in zip(ent["up"], ent["down"], ent["mix"])]
    tail = [drops[j] for j in range(k2, cfg.T + 1)]
    head = [drops[j] for j in range(0, k1 + 1)]
    drop_error = max(abs(v - LOG2) for v in tail)
    win_rep, window = windowed_k_convexity(pi_mix, cfg.K, cfg.tol)
    full_rep = check_k_convexity(pi_mix, cfg.K, cfg.tol)
    return Log2Report(
        config=cfg,
        times=times,
        ent_up=ent["up"],
        ent_down=ent["down"],
        ent_mix=ent["mix"],
        drops=drops,
        drop=tail[0],
        drop_error=drop_error,
        head_drop=max(abs(v) for v in head),
        slack=win_rep.worst_slack,
        slack_window=window,
        slack_full=full_rep.worst_slack,
        cd_verdict=win_rep.passed,
        pi_up=pi_up,
        pi_down=pi_down,
        pi_mix=pi_mix,
    )


def length_bound(K: float) -> float:
    """Largest admissible geodesic length, ``sqrt(log 2 / (6|K| + 1))``."""
    return math.sqrt(LOG2 / (6 * abs(K) + 1))
