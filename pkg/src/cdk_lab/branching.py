"""Branching geodesics: detection, pair-product measures, subset splitting.

Agreement convention: two geodesics *agree on* ``[0, t]`` when their step
sequences coincide at every grid time ``<= t`` (inclusive).  A pair branches
at ``t`` when it agrees on ``[0, t]`` for some ``t > 0`` and differs later.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from cdk_lab._num import fsum, is_exact, is_zero
from cdk_lab.errors import NormalizationError, PreconditionError, SizeError, StructuralError
from cdk_lab.geoplans import GeodesicPlan
from cdk_lab.space import DiscreteGeodesic, FiniteMMSpace, grid_index, is_constant_speed


def agreement_index(g1: DiscreteGeodesic, g2: DiscreteGeodesic) -> int:
    """Largest ``k`` with ``g1`` and ``g2`` equal at steps ``0..k``; -1 if the starts differ."""
    k = -1
    for a, b in zip(g1.steps, g2.steps):
        if a != b:
            break
        k += 1
    return k


# -----------------------------------------------------------------------------
# Pair-product measure and branching profile
# -----------------------------------------------------------------------------
@dataclass
class PairMeasure:
    atoms: list  # [((g1, g2), mass)]
    T: int

    def __post_init__(self):
        if any(g1.T != self.T or g2.T != self.T for (g1, g2), _ in self.atoms):
            raise StructuralError("pair components must share the resolution T")
        total = fsum(m for _, m in self.atoms)
        if not (total == 1 if is_exact(total) else abs(total - 1) <= 1e-12):
            raise ValueError(f"pair measure masses sum to {total}")

    @property
    def diagonal_mass(self):
        return fsum(m for (g1, g2), m in self.atoms if g1 == g2) if self.atoms else 0

    def first_marginal(self) -> dict:
        out: dict = {}
        for (g1, _), m in self.atoms:
            out[g1] = out.get(g1, 0) + m
        return out

    def second_marginal(self) -> dict:
        out: dict = {}
        for (_, g2), m in self.atoms:
            out[g2] = out.get(g2, 0) + m
        return out

    def off_diagonal(self) -> dict:
        """Off-diagonal part as a ``{(g1, g2): mass}`` mapping (not renormalized)."""
        return {(g1, g2): m for (g1, g2), m in self.atoms if g1 != g2}


def pair_product_measure(pi: GeodesicPlan, T_split) -> PairMeasure:
    """Mix ``pi_g x pi_g`` over heads ``g``, where ``pi_g`` is ``pi`` conditioned
    on its restriction to ``[0, T_split]`` being ``g``."""
    k = grid_index(T_split, pi.T)
    if not 0 < k < pi.T:
        raise ValueError("T_split must lie strictly inside (0, 1)")
    groups: dict = {}
    for g, m in pi.atoms:
        groups.setdefault(g.steps[: k + 1], []).append((g, m))
    atoms = []
    for head in sorted(groups):
        members = groups[head]
        w = fsum(m for _, m in members)
        for g1, m1 in members:
            for g2, m2 in members:
                atoms.append(((g1, g2), m1 * m2 / w))
    return PairMeasure(atoms, pi.T)


@dataclass
class BranchingProfile:
    times: list
    values: list
    t_star: Any  # grid time with the largest one-step decrease
    max_drop: Any

    def as_dict(self):
        return {t: f for t, f in zip(self.times, self.values)}


def branching_profile(sigma: PairMeasure) -> BranchingProfile:
    """``f(t)``: mass of pairs agreeing on ``[0, t]``, at every grid time."""
    T = sigma.T
    agree = [(agreement_index(g1, g2), m) for (g1, g2), m in sigma.atoms]
    values = []
    for k in range(T + 1):
        vals = [m for a, m in agree if a >= k]
        values.append(fsum(vals) if vals else 0)
    drops = [values[k] - values[k + 1] for k in range(T)]
    kstar = int(np.argmax([float(d) for d in drops])) if drops else 0
    times = [Fraction(k, T) for k in range(T + 1)]
    return BranchingProfile(times, values, times[kstar], drops[kstar] if drops else 0)


# -----------------------------------------------------------------------------
# Branching detection
# -----------------------------------------------------------------------------
@dataclass
class BranchPair:
    i: int
    j: int
    t_branch: Fraction  # last grid time of agreement


@dataclass
class BranchReport:
    pairs: list
    diagonal_mass: Any
    profile: Optional[BranchingProfile]

    @property
    def essentially_nonbranching(self) -> bool:
        return not self.pairs

    def __bool__(self) -> bool:
        return self.essentially_nonbranching

    def to_dict(self) -> dict:
        return {
            "pairs": [{"i": p.i, "j": p.j, "t_branch": float(p.t_branch)} for p in self.pairs],
            "essentially_nonbranching": self.essentially_nonbranching,
            "profile": (
                [{"t": float(t), "f": float(f)} for t, f in zip(self.profile.times, self.profile.values)]
                if self.profile
                else []
            ),
        }


def find_branching_pairs(pi: GeodesicPlan) -> BranchReport:
    """All support pairs agreeing on an initial segment of positive length and
    differing afterwards.  ``i``/``j`` index ``pi.atoms``."""
    T = pi.T
    pairs = []
    geos = pi.geodesics
    for i in range(len(geos)):
        for j in range(i + 1, len(geos)):
            k = agreement_index(geos[i], geos[j])
            if 1 <= k < T:
                pairs.append(BranchPair(i, j, Fraction(k, T)))
    profile = None
    diag = 1
    if T >= 2:
        sigma = pair_product_measure(pi, Fraction(1, T))
        profile = branching_profile(sigma)
        diag = sigma.diagonal_mass
    return BranchReport(pairs, diag, profile)


# -----------------------------------------------------------------------------
# Subset splitting
# -----------------------------------------------------------------------------
@dataclass
class SplitResult:
    E: tuple
    value: Any
    mean: float
    n: int
    mass: Any

    @property
    def bound(self) -> float:
        """Averaging lower bound ``2^(n-2) / (2^n - 2)`` times the total mass."""
        return 2.0 ** (self.n - 2) / (2.0**self.n - 2) * float(self.mass)


def _as_pair_matrix(sigma):
    if isinstance(sigma, PairMeasure):
        sigma = {pair: m for pair, m in sigma.atoms}
    if isinstance(sigma, Mapping):
        labels = sorted({x for pair in sigma for x in pair}, key=_label_key)
        pos = {x: k for k, x in enumerate(labels)}
        n = len(labels)
        mat = np.zeros((n, n))
        exact = {}
        for (a, b), m in sigma.items():
            mat[pos[a], pos[b]] += float(m)
            exact[(pos[a], pos[b])] = exact.get((pos[a], pos[b]), 0) + m
        return labels, mat, exact
    mat = np.asarray(sigma, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise StructuralError("pair measure matrix must be square")
    n = mat.shape[0]
    exact = {(a, b): mat[a, b] for a in range(n) for b in range(n) if mat[a, b] != 0}
    return list(range(n)), mat, exact


def _label_key(x):
    if isinstance(x, DiscreteGeodesic):
        return (1, x.steps)
    return (0, x)


def best_split(sigma, cap: int = 20, chunk: int = 1 << 14) -> SplitResult:
    """Exhaustive maximization of ``sigma(E x E^c)`` over nonempty proper ``E``.

    ``sigma`` is a ``{(a, b): mass}`` mapping, a :class:`PairMeasure` or a square
    matrix; its diagonal must carry no mass.  Ties go to the lowest bitmask
    (bit ``k`` set means label ``k`` is in ``E``).  Also returns the mean over
    all ``2^n - 2`` subsets.
    """
    labels, mat, exact = _as_pair_matrix(sigma)
    n = len(labels)
    if n > cap:
        raise SizeError(f"ground set of {n} exceeds cap {cap}")
    if any(a == b and not is_zero(m) for (a, b), m in exact.items()):
        raise PreconditionError("pair measure has mass on the diagonal")
    if n < 2:
        raise PreconditionError("need at least two points to split")
    bits = np.arange(n, dtype=np.int64)
    best_val, best_mask, total = -1.0, 0, 0.0
    for lo in range(1, 2**n - 1, chunk):
        masks = np.arange(lo, min(lo + chunk, 2**n - 1), dtype=np.int64)
        M = ((masks[:, None] >> bits[None, :]) & 1).astype(float)
        vals = np.einsum("ka,ab,kb->k", M, mat, 1.0 - M)
        total += float(vals.sum())
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val, best_mask = float(vals[k]), int(masks[k])
    members = [a for a in range(n) if best_mask >> a & 1]
    value = fsum(m for (a, b), m in exact.items() if a in members and b not in members)
    mass = fsum(exact.values())
    E = tuple(labels[a] for a in members)
    return SplitResult(E, value, total / (2**n - 2), n, mass)


# -----------------------------------------------------------------------------
# Single-branch normalization
# -----------------------------------------------------------------------------
def single_branch_normalize(
    space: FiniteMMSpace,
    g1: DiscreteGeodesic,
    g2: DiscreteGeodesic,
    T_split=None,
    tol_geo: float = 1e-9,
):
    """Replace a branching pair by one that disagrees on a single time interval.

    With distinct endpoints the second geodesic follows ``g1`` up to the last
    common time and ``g2`` afterwards.  With equal endpoints it follows ``g1``
    except on the first interval where the two disagree, where it follows
    ``g2``.  The first output is ``g1`` itself.  Both outputs are re-checked
    for constant speed.
    """
    if g1.T != g2.T:
        raise StructuralError("pair must share the resolution T")
    T = g1.T
    a = agreement_index(g1, g2)
    if a < 0:
        raise PreconditionError("geodesics do not share a starting point")
    if T_split is not None and a < grid_index(T_split, T):
        raise PreconditionError(f"geodesics do not agree on [0, {T_split}]")
    if g1.steps == g2.steps:
        return g1, g2
    s1, s2 = g1.steps, g2.steps
    if s1[-1] != s2[-1]:
        last = max(k for k in range(T + 1) if s1[k] == s2[k])
        steps4 = s1[: last + 1] + s2[last + 1 :]
    else:
        first_diff = a + 1
        back = next(k for k in range(first_diff, T + 1) if s1[k] == s2[k])
        steps4 = s1[:first_diff] + s2[first_diff:back] + s1[back:]
    if not is_constant_speed(space, steps4, tol_geo):
        raise NormalizationError(f"spliced sequence {steps4} is not a geodesic")
    g4 = DiscreteGeodesic(steps4, space.dist[steps4[0], steps4[-1]])
    return g1, g4


def disagreement_set(g1: DiscreteGeodesic, g2: DiscreteGeodesic) -> list:
    return [k for k, (a, b) in enumerate(zip(g1.steps, g2.steps)) if a != b]
