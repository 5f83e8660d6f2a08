"""Exact quadratic-cost optimal transport on finite spaces.

:func:`solve_w2` is a transportation (network) simplex over the bipartite
support graph.  It starts from the north-west-corner basis and pivots with
Bland's rule (lowest-index entering cell, lowest-index leaving cell), which
both terminates on degenerate problems and makes the returned plan a pure
function of the input.  With Fraction weights and distances every pivot is
exact.

:func:`transport_vertices` enumerates the vertices of the transport polytope
by walking spanning trees of the bipartite graph; :func:`brute_force_w2` is
the independent oracle built on it.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Optional, Union

import numpy as np

from cdk_lab._num import FLOAT_TOL, as_array, fsum, is_exact, is_zero, to_number
from cdk_lab.errors import EmptyRestrictionError, SizeError, StructuralError
from cdk_lab.space import FiniteMMSpace, number_to_json

MARGINAL_TOL = 1e-12


# -----------------------------------------------------------------------------
# Measures and plans
# -----------------------------------------------------------------------------
@dataclass(eq=False)
class ProbMeasure:
    """Probability weights on the points of ``space``."""

    space: FiniteMMSpace
    weights: np.ndarray

    def __post_init__(self):
        if not isinstance(self.weights, np.ndarray):
            self.weights = as_array(self.weights)
        if len(self.weights) != self.space.n:
            raise StructuralError(f"{len(self.weights)} weights for {self.space.n} points")
        nz = self.weights[self.weights != 0]
        if any(w < 0 for w in nz):
            raise ValueError("measure weights must be nonnegative")
        total = fsum(nz)
        if is_exact(total):
            if total != 1:
                raise ValueError(f"measure weights sum to {total}, not 1")
        elif abs(total - 1) > MARGINAL_TOL:
            raise ValueError(f"measure weights sum to {total!r}, not 1")
        if not self.support:
            raise ValueError("measure has empty support")

    @property
    def exact(self) -> bool:
        return self.weights.dtype == object

    @property
    def support(self) -> list:
        return [int(i) for i in np.flatnonzero(self.weights > 0)]

    def __getitem__(self, i):
        return self.weights[i]

    @classmethod
    def dirac(cls, space: FiniteMMSpace, i: int) -> "ProbMeasure":
        w = [0] * space.n
        w[i] = 1
        return cls(space, w)

    @classmethod
    def uniform(cls, space: FiniteMMSpace, points) -> "ProbMeasure":
        points = list(points)
        w = [Fraction(0)] * space.n
        for p in points:
            w[p] += Fraction(1, len(points))
        return cls(space, w)

    @classmethod
    def from_masses(cls, space: FiniteMMSpace, masses: Mapping[int, Any]) -> "ProbMeasure":
        vals = {i: to_number(v) for i, v in masses.items()}
        if all(type(v) is Fraction for v in vals.values()):
            w = np.full(space.n, Fraction(0), dtype=object)
        else:
            w = np.zeros(space.n)
        for i, v in vals.items():
            w[i] = w[i] + v
        return cls(space, w)

    def equals(self, other: "ProbMeasure", tol: float = MARGINAL_TOL) -> bool:
        if not self.space.same_as(other.space):
            return False
        if self.exact and other.exact:
            return bool(np.all(self.weights == other.weights))
        return bool(np.max(np.abs(self.weights.astype(float) - other.weights.astype(float))) <= tol)

    def to_dict(self) -> dict:
        return {
            "weights": {
                str(self.space.point_ids[i]): number_to_json(self.weights[i]) for i in self.support
            }
        }


def measure_from_dict(space: FiniteMMSpace, data) -> ProbMeasure:
    weights = data["weights"] if isinstance(data, dict) and "weights" in data else data
    if isinstance(weights, dict):
        by_str = {str(pid): i for i, pid in enumerate(space.point_ids)}
        masses = {}
        for key, val in weights.items():
            if key not in by_str:
                raise KeyError(f"unknown point id {key!r}")
            masses[by_str[key]] = val
        return ProbMeasure.from_masses(space, masses)
    return ProbMeasure(space, weights)


def load_measure(space: FiniteMMSpace, path) -> ProbMeasure:
    return measure_from_dict(space, json.loads(Path(path).read_text()))


def _sq(space: FiniteMMSpace, i: int, j: int):
    d = space.dist[i, j]
    return d * d


@dataclass(eq=False)
class TransportPlan:
    """A coupling between ``source`` and ``target``.

    ``coupling`` maps point-index pairs ``(i, j)`` to positive masses.
    """

    source: ProbMeasure
    target: ProbMeasure
    coupling: dict
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.coupling = {k: v for k, v in sorted(self.coupling.items()) if v > 0}
        if not self.source.space.same_as(self.target.space):
            raise StructuralError("source and target live on different spaces")
        if self.validate:
            self._check_marginals()

    @property
    def space(self) -> FiniteMMSpace:
        return self.source.space

    @property
    def cost(self):
        return fsum(m * _sq(self.space, i, j) for (i, j), m in self.coupling.items())

    @property
    def exact(self) -> bool:
        return all(is_exact(v) for v in self.coupling.values())

    def marginals(self):
        n = self.space.n
        rows: list = [[] for _ in range(n)]
        cols: list = [[] for _ in range(n)]
        for (i, j), m in self.coupling.items():
            rows[i].append(m)
            cols[j].append(m)
        return [fsum(r) if r else 0 for r in rows], [fsum(c) if c else 0 for c in cols]

    def _check_marginals(self):
        rows, cols = self.marginals()
        for name, got, want in (("row", rows, self.source.weights), ("column", cols, self.target.weights)):
            for i, (g, w) in enumerate(zip(got, want)):
                if is_exact(g) and is_exact(w):
                    ok = g == w
                else:
                    ok = abs(float(g) - float(w)) <= MARGINAL_TOL
                if not ok:
                    raise StructuralError(f"{name} sum at point {i} is {g}, expected {w}")

    @classmethod
    def from_coupling(cls, space: FiniteMMSpace, coupling: Mapping) -> "TransportPlan":
        src: dict = {}
        tgt: dict = {}
        for (i, j), m in coupling.items():
            src[i] = src.get(i, 0) + m
            tgt[j] = tgt.get(j, 0) + m
        return cls(ProbMeasure.from_masses(space, src), ProbMeasure.from_masses(space, tgt), dict(coupling))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source_id", "target_id", "mass"])
        ids = self.space.point_ids
        for (i, j), m in self.coupling.items():
            w.writerow([ids[i], ids[j], number_to_json(m)])
        return buf.getvalue()


def plan_from_csv(space: FiniteMMSpace, text: str) -> TransportPlan:
    by_str = {str(pid): i for i, pid in enumerate(space.point_ids)}
    coupling: dict = {}
    for row in csv.DictReader(io.StringIO(text)):
        key = (by_str[row["source_id"]], by_str[row["target_id"]])
        coupling[key] = coupling.get(key, 0) + to_number(row["mass"])
    return TransportPlan.from_coupling(space, coupling)


def _check_same_space(mu0: ProbMeasure, mu1: ProbMeasure) -> None:
    if not mu0.space.same_as(mu1.space):
        raise StructuralError("measures live on different spaces")


# -----------------------------------------------------------------------------
# Network simplex
# -----------------------------------------------------------------------------
def _tree_path(adj: dict, start, goal) -> list:
    """Node path from ``start`` to ``goal`` in the basis tree."""
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nb in adj[node]:
            if nb not in parent:
                parent[nb] = node
                queue.append(nb)
    path = [goal]
    while path[-1] != start:
        path.append(parent[path[-1]])
    path.reverse()
    return path


def transport_simplex(a: list, b: list, C: list) -> dict:
    """Solve ``min sum C[i][j] x[i][j]`` over couplings of ``a`` and ``b``.

    Returns the basic cells ``{(i, j): flow}`` of the optimal basis (zero
    flows included).  ``a`` and ``b`` must have equal totals.
    """
    m, n = len(a), len(b)
    exact = all(is_exact(v) for v in itertools.chain(a, b)) and all(
        is_exact(c) for row in C for c in row
    )
    scale = max((abs(float(c)) for row in C for c in row), default=1.0) or 1.0
    eps = 0 if exact else 1e-12 * scale
    flow_tol = 0 if exact else FLOAT_TOL

    ra, rb = list(a), list(b)
    flow: dict = {}
    i = j = 0
    while True:
        row_done = ra[i] <= rb[j]
        x = ra[i] if row_done else rb[j]
        if not exact and x < 0:
            x = 0.0
        flow[(i, j)] = x
        ra[i] -= x
        rb[j] -= x
        if i == m - 1 and j == n - 1:
            break
        if (row_done and i < m - 1) or j == n - 1:
            i += 1
        else:
            j += 1

    while True:
        adj: dict = {("r", r): [] for r in range(m)}
        adj.update({("c", c): [] for c in range(n)})
        for r, c in flow:
            adj[("r", r)].append(("c", c))
            adj[("c", c)].append(("r", r))
        u: dict = {0: 0}
        v: dict = {}
        queue = deque([("r", 0)])
        seen = {("r", 0)}
        while queue:
            kind, idx = queue.popleft()
            for nb in adj[(kind, idx)]:
                if nb in seen:
                    continue
                seen.add(nb)
                if kind == "r":
                    v[nb[1]] = C[idx][nb[1]] - u[idx]
                else:
                    u[nb[1]] = C[nb[1]][idx] - v[idx]
                queue.append(nb)

        entering = None
        for r in range(m):
            ur, Cr = u[r], C[r]
            for c in range(n):
                if (r, c) in flow:
                    continue
                if Cr[c] - ur - v[c] < -eps:
                    entering = (r, c)
                    break
            if entering is not None:
                break
        if entering is None:
            return flow

        r0, c0 = entering
        path = _tree_path(adj, ("c", c0), ("r", r0))
        cells = []
        for p, q in zip(path, path[1:]):
            cells.append((p[1], q[1]) if p[0] == "r" else (q[1], p[1]))
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(flow[cell] for cell in minus)
        leaving = min(
            (cell for cell in minus if abs(flow[cell] - theta) <= flow_tol),
            key=lambda cell: cell[0] * n + cell[1],
        )
        for cell in minus:
            flow[cell] -= theta
        for cell in plus:
            flow[cell] += theta
        del flow[leaving]
        flow[entering] = theta
        if not exact:
            for cell in minus:
                if cell in flow and flow[cell] < 0:
                    flow[cell] = 0.0


def _restricted_problem(mu0: ProbMeasure, mu1: ProbMeasure):
    rows, cols = mu0.support, mu1.support
    a = [mu0.weights[i] for i in rows]
    b = [mu1.weights[j] for j in cols]
    sp = mu0.space
    C = [[_sq(sp, i, j) for j in cols] for i in rows]
    return rows, cols, a, b, C


def solve_w2(mu0: ProbMeasure, mu1: ProbMeasure):
    """Optimal plan for squared-distance cost and its cost ``W_2^2``."""
    _check_same_space(mu0, mu1)
    rows, cols, a, b, C = _restricted_problem(mu0, mu1)
    flow = transport_simplex(a, b, C)
    coupling = {(rows[r], cols[c]): x for (r, c), x in flow.items() if x > 0}
    plan = TransportPlan(mu0, mu1, coupling)
    return plan, plan.cost


def w2_squared(mu0: ProbMeasure, mu1: ProbMeasure):
    return solve_w2(mu0, mu1)[1]


# -----------------------------------------------------------------------------
# Vertex enumeration (oracle)
# -----------------------------------------------------------------------------
def _spanning_trees(m: int, n: int) -> Iterator[tuple]:
    """All spanning trees of K_{m,n} as tuples of cells, in lexicographic order."""
    edges = [(r, c) for r in range(m) for c in range(n)]
    need = m + n - 1
    parent = list(range(m + n))

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    chosen: list = []

    def rec(k):
        if len(chosen) == need:
            yield tuple(chosen)
            return
        if len(edges) - k < need - len(chosen):
            return
        r, c = edges[k]
        ra, rc = find(r), find(m + c)
        if ra != rc:
            parent[ra] = rc
            chosen.append((r, c))
            yield from rec(k + 1)
            chosen.pop()
            parent[ra] = ra
        yield from rec(k + 1)

    yield from rec(0)


def _tree_flow(tree, a, b):
    """Unique flow on a spanning tree meeting the marginals, by leaf peeling."""
    m, n = len(a), len(b)
    resid = list(a) + list(b)
    adj: list = [[] for _ in range(m + n)]
    for r, c in tree:
        adj[r].append(m + c)
        adj[m + c].append(r)
    deg = [len(x) for x in adj]
    alive = [True] * (m + n)
    leaves = deque(k for k in range(m + n) if deg[k] == 1)
    flow = {}
    while leaves:
        k = leaves.popleft()
        if not alive[k] or deg[k] != 1:
            continue
        nb = next(x for x in adj[k] if alive[x])
        x = resid[k]
        cell = (k, nb - m) if k < m else (nb, k - m)
        flow[cell] = x
        resid[nb] -= x
        alive[k] = False
        deg[nb] -= 1
        if deg[nb] == 1:
            leaves.append(nb)
    return flow


def transport_vertices(
    mu0: ProbMeasure, mu1: ProbMeasure, cap: Optional[int] = None, limit: Optional[int] = None
) -> Iterator[dict]:
    """Distinct vertices of the transport polytope as point-index couplings.

    Every vertex is the flow carried by some spanning tree of the bipartite
    support graph; trees are visited in lexicographic order and degenerate
    repeats are dropped.  ``cap`` bounds ``|supp mu0| + |supp mu1|``.
    """
    _check_same_space(mu0, mu1)
    rows, cols, a, b, _ = _restricted_problem(mu0, mu1)
    if cap is not None and len(rows) + len(cols) > cap:
        raise SizeError(f"combined support {len(rows) + len(cols)} exceeds cap {cap}")
    seen = set()
    emitted = 0
    for tree in _spanning_trees(len(rows), len(cols)):
        flow = _tree_flow(tree, a, b)
        if any(not is_zero(x) and x < 0 for x in flow.values()):
            continue
        coupling = {(rows[r], cols[c]): x for (r, c), x in flow.items() if not is_zero(x)}
        key = frozenset(coupling)
        if key in seen:
            continue
        seen.add(key)
        yield coupling
        emitted += 1
        if limit is not None and emitted >= limit:
            return


def brute_force_w2(mu0: ProbMeasure, mu1: ProbMeasure, cap: int = 8):
    """Minimum cost over all vertices of the transport polytope."""
    space = mu0.space
    best = None
    for coupling in transport_vertices(mu0, mu1, cap=cap):
        cost = fsum(x * _sq(space, i, j) for (i, j), x in coupling.items())
        if best is None or cost < best:
            best = cost
    return best


@dataclass
class VertexScan:
    """Optimal vertices of the transport polytope found within a budget."""

    plans: list
    cost: Any
    exhaustive: bool


def optimal_vertices(
    mu0: ProbMeasure, mu1: ProbMeasure, budget: int = 1000, tol: float = 1e-9
) -> VertexScan:
    """Vertices of the optimal face, i.e. polytope vertices of cost ``W_2^2``."""
    best, w2sq = solve_w2(mu0, mu1)
    space = mu0.space
    plans = []
    exhaustive = True
    for count, coupling in enumerate(transport_vertices(mu0, mu1)):
        if count >= budget:
            exhaustive = False
            break
        cost = fsum(x * _sq(space, i, j) for (i, j), x in coupling.items())
        optimal = cost == w2sq if is_exact(cost) and is_exact(w2sq) else abs(float(cost) - float(w2sq)) <= tol
        if optimal:
            plans.append(TransportPlan(mu0, mu1, coupling, validate=False))
    if not plans:
        # a truncated scan may miss the optimal face; the simplex basis is a vertex of it
        plans.append(best)
    return VertexScan(plans, w2sq, exhaustive)


# -----------------------------------------------------------------------------
# Cyclical monotonicity and restriction
# -----------------------------------------------------------------------------
@dataclass
class MonotonicityReport:
    passed: bool
    cycle: Optional[list] = None  # support pairs (i, j) in cycle order
    slack: Any = 0

    def __bool__(self) -> bool:
        return self.passed


def check_cyclical_monotonicity(
    plan: TransportPlan, tol: Optional[float] = None, max_len: int = 3
) -> MonotonicityReport:
    """Search the support for a cycle whose target rotation lowers the cost.

    For support pairs ``(x_1,y_1) .. (x_k,y_k)`` taken in cycle order the
    rotated pairing sends ``x_i`` to ``y_{i+1}``; a violation is reported when
    ``sum d(x_i,y_i)^2 - sum d(x_i,y_{i+1})^2 > tol``.  Cycles up to
    ``max_len`` are searched, shortest first, then lexicographically.
    """
    pairs = list(plan.coupling)
    s = len(pairs)
    space = plan.space
    scaled = space.scaled_dist()
    if tol is None:
        tol = 0 if scaled is not None else 1e-9
    if scaled is not None:
        D, q = scaled
        c = np.array([[int(D[x, y]) ** 2 for (_, y) in pairs] for (x, _) in pairs], dtype=object)
        c = c.astype(np.int64) if s and max(abs(int(v)) for v in c.flat) < 2**40 else c
        unit = Fraction(1, q * q)
        tol_c = tol * q * q
    else:
        Df = space.float_dist()
        c = np.array([[Df[x, y] ** 2 for (_, y) in pairs] for (x, _) in pairs], dtype=float).reshape(s, s)
        unit = 1.0
        tol_c = tol

    def report(cycle_idx, excess):
        return MonotonicityReport(False, [pairs[k] for k in cycle_idx], excess * unit if scaled is not None else excess)

    if s >= 2 and max_len >= 2:
        diag = np.diagonal(c)
        ex2 = diag[:, None] + diag[None, :] - c - c.T
        hits = np.argwhere(np.triu(ex2 > tol_c, 1))
        if len(hits):
            a, b = hits[0]
            return report([int(a), int(b)], ex2[a, b])
    if s >= 3 and max_len >= 3:
        diag = np.diagonal(c)
        for a in range(s):
            # cycles a -> b -> e -> a with a the smallest index
            base = diag[a] + diag[:, None] + diag[None, :]
            fwd = base - (c[a, :][:, None] + c + c[:, a][None, :])
            for b, e in np.argwhere(fwd > tol_c):
                if a < b and a < e and b != e:
                    return report([a, int(b), int(e)], fwd[b, e])
    for k in range(4, max_len + 1):
        for combo in itertools.combinations(range(s), k):
            for rest in itertools.permutations(combo[1:]):
                cyc = (combo[0],) + rest
                lhs = sum(c[i, i] for i in cyc)
                rhs = sum(c[cyc[t], cyc[(t + 1) % k]] for t in range(k))
                if lhs - rhs > tol_c:
                    return report(list(cyc), lhs - rhs)
    return MonotonicityReport(True)


def restrict_plan(
    plan: TransportPlan, keep: Union[Callable[[int, int], Any], Mapping]
):
    """Renormalized sub-coupling ``f * plan / sum(f * plan)``.

    ``keep`` is a predicate or density on support pairs (callable ``(i, j)``
    or mapping).  Returns the restricted plan and the kept mass.
    """
    weighted = {}
    for (i, j), m in plan.coupling.items():
        f = keep.get((i, j), 0) if isinstance(keep, Mapping) else keep(i, j)
        f = to_number(f) if not isinstance(f, bool) else (1 if f else 0)
        if f < 0:
            raise ValueError("restriction density must be nonnegative")
        if f:
            weighted[(i, j)] = m * f
    kept = fsum(weighted.values()) if weighted else 0
    if is_zero(kept):
        raise EmptyRestrictionError("restriction keeps zero mass")
    coupling = {k: v / kept for k, v in weighted.items()}
    return TransportPlan.from_coupling(plan.space, coupling), kept
