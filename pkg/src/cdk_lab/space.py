"""Finite metric measure spaces and their discrete constant-speed geodesics.

Points are addressed by integer index everywhere inside the package; the
``point_ids`` list only matters for file I/O and reports.  Distances are kept
as exact :class:`~fractions.Fraction` values whenever the inputs allow it
(graph weights and dyadic grid coordinates do), so most equalities in the
geodesic and transport code are decided without tolerances.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from cdk_lab._num import array_is_exact, as_array, as_matrix, is_exact, to_number
from cdk_lab.errors import GridError, SpecError, StructuralError

DEFAULT_TOL_GEO = 1e-9


# -----------------------------------------------------------------------------
# Spaces
# -----------------------------------------------------------------------------
@dataclass(eq=False)
class FiniteMMSpace:
    """A finite metric space with a positive reference measure.

    Parameters
    ----------
    point_ids : sequence
        Opaque identifiers, one per point.
    dist : array_like
        ``n x n`` distance matrix.  Exact entries (ints, Fractions, dyadic
        floats) give an object array of Fractions; anything else is float64.
    m : array_like
        Positive reference weights.
    labels : sequence, optional
        Per-point coordinate annotations (grids carry their coordinates).
    """

    point_ids: list
    dist: np.ndarray
    m: np.ndarray
    labels: Optional[list] = None
    _scaled: Optional[tuple] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.point_ids = list(self.point_ids)
        if not isinstance(self.dist, np.ndarray) or self.dist.ndim != 2:
            self.dist = as_matrix(self.dist)
        if not isinstance(self.m, np.ndarray):
            self.m = as_array(self.m)
        if self.labels is not None:
            self.labels = list(self.labels)
        self._index = {pid: i for i, pid in enumerate(self.point_ids)}

    @property
    def n(self) -> int:
        return len(self.point_ids)

    @property
    def exact(self) -> bool:
        return array_is_exact(self.dist)

    def index(self, pid) -> int:
        try:
            return self._index[pid]
        except KeyError:
            raise KeyError(f"unknown point id {pid!r}") from None

    def d(self, i: int, j: int):
        return self.dist[i, j]

    def scaled_dist(self):
        """Integer matrix ``D`` and denominator ``q`` with ``dist = D / q``.

        Only available for exact spaces; returns ``None`` otherwise or when the
        scaled integers would not fit in int64.
        """
        if not self.exact:
            return None
        if self._scaled is None:
            dens = [Fraction(v).denominator for v in self.dist.flat]
            q = reduce(lambda a, b: a * b // math.gcd(a, b), dens, 1)
            ints = [int(Fraction(v) * q) for v in self.dist.flat]
            if ints and max(abs(v) for v in ints) * 64 > 2**62:
                self._scaled = (None, None)
            else:
                mat = np.array(ints, dtype=np.int64).reshape(self.dist.shape)
                self._scaled = (mat, q)
        mat, q = self._scaled
        return None if mat is None else (mat, q)

    def float_dist(self) -> np.ndarray:
        return self.dist.astype(float)

    def same_as(self, other: "FiniteMMSpace") -> bool:
        if self is other:
            return True
        return (
            self.point_ids == other.point_ids
            and self.dist.shape == other.dist.shape
            and bool(np.all(self.dist == other.dist))
        )


@dataclass
class MetricViolation:
    axiom: str  # "symmetry" | "zero_diagonal" | "positivity" | "triangle" | "measure"
    witness: tuple
    excess: float


@dataclass
class MetricReport:
    violations: list

    @property
    def valid(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.valid


def check_metric(space: FiniteMMSpace, tol_metric: Optional[float] = None) -> MetricReport:
    """Check the metric axioms and the positivity of the reference measure.

    Every violated axiom is listed with a witness (a pair for symmetry and
    positivity, a triple ``(i, k, j)`` for ``d(i,j) > d(i,k) + d(k,j)``).
    ``tol_metric`` defaults to 0 on exact spaces and 1e-12 on float ones.
    """
    n = space.n
    if space.dist.shape != (n, n) or len(space.m) != n:
        raise StructuralError(
            f"distance matrix {space.dist.shape} / measure {len(space.m)} "
            f"do not match {n} points"
        )
    if tol_metric is None:
        tol_metric = 0.0 if space.exact else 1e-12
    out = []
    scaled = space.scaled_dist()
    if scaled is not None:
        D, q = scaled
        tol_int = int(math.floor(tol_metric * q))
    else:
        D, q, tol_int = space.float_dist(), 1, tol_metric

    diff = D - D.T
    for i, j in zip(*np.nonzero(np.abs(diff) > tol_int)):
        if i < j:
            out.append(MetricViolation("symmetry", (int(i), int(j)), float(abs(diff[i, j])) / q))
    for i in range(n):
        if abs(D[i, i]) > tol_int:
            out.append(MetricViolation("zero_diagonal", (i,), float(D[i, i]) / q))
    off = ~np.eye(n, dtype=bool)
    for i, j in zip(*np.nonzero(off & (D <= 0))):
        out.append(MetricViolation("positivity", (int(i), int(j)), float(-D[i, j]) / q))
    for k in range(n):
        # D[i,j] > D[i,k] + D[k,j]
        excess = D - (D[:, k][:, None] + D[k, :][None, :])
        for i, j in zip(*np.nonzero(excess > tol_int)):
            out.append(MetricViolation("triangle", (int(i), k, int(j)), float(excess[i, j]) / q))
    for i, w in enumerate(space.m):
        if not (w > 0) or not math.isfinite(float(w)):
            out.append(MetricViolation("measure", (i,), float(w)))
    out.sort(key=lambda v: (v.axiom, v.witness))
    return MetricReport(out)


# -----------------------------------------------------------------------------
# Generators
# -----------------------------------------------------------------------------
@dataclass
class SpaceGenSpec:
    """Recipe for a generated space.

    ``kind`` is ``"grid"`` (``side`` x ``side`` points at multiples of a dyadic
    ``step``, distance is the l^p norm with ``norm`` in {1, 2, "inf"}),
    ``"graph"`` (all-pairs shortest paths of ``edges`` = ``[(u, v, w), ...]``
    on ``n_nodes`` nodes) or ``"explicit"`` (``matrix`` given directly).
    ``measure`` is ``"uniform"`` or a list of positive weights.
    """

    kind: str
    side: int = 0
    step: Any = 1
    norm: Any = "inf"
    edges: Sequence = ()
    n_nodes: Optional[int] = None
    matrix: Optional[Sequence] = None
    ids: Optional[Sequence] = None
    measure: Any = "uniform"

    @classmethod
    def from_dict(cls, data: dict) -> "SpaceGenSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise SpecError(f"unknown space spec keys: {sorted(extra)}")
        return cls(**data)


def _is_dyadic(x) -> bool:
    if not is_exact(x):
        return False
    den = Fraction(x).denominator
    return den & (den - 1) == 0


def _norm_key(norm) -> str:
    key = str(norm).lower()
    if key in ("inf", "infinity", "max"):
        return "inf"
    if key in ("1", "2"):
        return key
    raise SpecError(f"norm must be 1, 2 or inf, got {norm!r}")


def _norm_distance(a, b, p: str):
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    if p == "inf":
        return max(dx, dy)
    if p == "1":
        return dx + dy
    sq = dx * dx + dy * dy
    num, den = Fraction(sq).numerator, Fraction(sq).denominator
    rn, rd = math.isqrt(num), math.isqrt(den)
    if rn * rn == num and rd * rd == den:
        return Fraction(rn, rd)
    return math.sqrt(sq)


def norm_matrix(coords, norm) -> np.ndarray:
    p = _norm_key(norm)
    n = len(coords)
    rows = [[_norm_distance(coords[i], coords[j], p) for j in range(n)] for i in range(n)]
    return as_matrix(rows)


def _grid_matrix(side: int, step, norm) -> np.ndarray:
    """Norm distances on a square grid, computed in integer step units."""
    p = _norm_key(norm)
    ij = np.array([(i, j) for i in range(side) for j in range(side)], dtype=np.int64)
    dx = np.abs(ij[:, 0][:, None] - ij[:, 0][None, :])
    dy = np.abs(ij[:, 1][:, None] - ij[:, 1][None, :])
    if p == "inf":
        units = np.maximum(dx, dy)
    elif p == "1":
        units = dx + dy
    else:
        sq = dx * dx + dy * dy
        root = np.round(np.sqrt(sq)).astype(np.int64)
        if not np.all(root * root == sq):
            return np.sqrt(sq.astype(float)) * float(step)
        units = root
    cache = {}
    flat = np.empty(units.size, dtype=object)
    for k, u in enumerate(units.flat):
        u = int(u)
        if u not in cache:
            cache[u] = Fraction(u) * step
        flat[k] = cache[u]
    return flat.reshape(units.shape)


def _measure_weights(measure, n: int) -> np.ndarray:
    if measure is None or measure == "uniform":
        return as_array([1] * n)
    weights = as_array(measure)
    if len(weights) != n:
        raise SpecError(f"measure has {len(weights)} weights for {n} points")
    if any(not (w > 0) for w in weights):
        raise SpecError("reference weights must be strictly positive")
    return weights


def shortest_path_matrix(n: int, edges) -> np.ndarray:
    """Floyd-Warshall on exact weights; unreachable pairs raise SpecError."""
    inf = None
    d = [[Fraction(0) if i == j else inf for j in range(n)] for i in range(n)]
    for u, v, w in edges:
        w = to_number(w)
        if not (w > 0):
            raise SpecError(f"edge ({u},{v}) has nonpositive weight {w}")
        if not (0 <= u < n and 0 <= v < n):
            raise SpecError(f"edge ({u},{v}) out of range for {n} nodes")
        if d[u][v] is None or w < d[u][v]:
            d[u][v] = d[v][u] = w
    for k in range(n):
        dk = d[k]
        for i in range(n):
            dik = d[i][k]
            if dik is None:
                continue
            di = d[i]
            for j in range(n):
                dkj = dk[j]
                if dkj is None:
                    continue
                cand = dik + dkj
                if di[j] is None or cand < di[j]:
                    di[j] = cand
    if any(v is None for row in d for v in row):
        raise SpecError("graph is disconnected")
    return as_matrix(d)


def grid_coords(side: int, step) -> list:
    return [(i * step, j * step) for i in range(side) for j in range(side)]


def build_space(spec: SpaceGenSpec) -> FiniteMMSpace:
    """Materialize a :class:`SpaceGenSpec`."""
    if spec.kind == "grid":
        step = to_number(spec.step)
        if not _is_dyadic(step) or not (step > 0):
            raise SpecError(f"grid step must be a positive dyadic rational, got {spec.step!r}")
        if spec.side < 1:
            raise SpecError("grid side must be >= 1")
        coords = grid_coords(spec.side, step)
        ids = [f"{i},{j}" for i in range(spec.side) for j in range(spec.side)]
        dist = _grid_matrix(spec.side, step, spec.norm)
        n = len(coords)
        return FiniteMMSpace(ids, dist, _measure_weights(spec.measure, n), labels=coords)
    if spec.kind == "graph":
        n = spec.n_nodes
        if n is None:
            n = 1 + max(max(u, v) for u, v, _ in spec.edges) if spec.edges else 1
        dist = shortest_path_matrix(n, spec.edges)
        ids = list(spec.ids) if spec.ids is not None else list(range(n))
        return FiniteMMSpace(ids, dist, _measure_weights(spec.measure, n))
    if spec.kind == "explicit":
        if spec.matrix is None:
            raise SpecError("explicit space needs a matrix")
        dist = as_matrix(spec.matrix)
        n = dist.shape[0]
        ids = list(spec.ids) if spec.ids is not None else list(range(n))
        return FiniteMMSpace(ids, dist, _measure_weights(spec.measure, n))
    raise SpecError(f"unknown space kind {spec.kind!r}")


def path_graph(n: int, weight=1) -> FiniteMMSpace:
    return build_space(SpaceGenSpec("graph", edges=[(i, i + 1, weight) for i in range(n - 1)], n_nodes=n))


def dyadic_grid(side: int, step=Fraction(1, 2), norm="inf") -> FiniteMMSpace:
    return build_space(SpaceGenSpec("grid", side=side, step=step, norm=norm))


def grid_point(space: FiniteMMSpace, x, y) -> int:
    """Index of the grid point with coordinates ``(x, y)``."""
    target = (to_number(x), to_number(y))
    for i, c in enumerate(space.labels or ()):
        if c[0] == target[0] and c[1] == target[1]:
            return i
    raise KeyError(f"no grid point at {target}")


# -----------------------------------------------------------------------------
# Discrete geodesics
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class DiscreteGeodesic:
    """A constant-speed sequence ``p_0 .. p_T`` of point indices."""

    steps: tuple
    length: Any = field(compare=False)

    @property
    def T(self) -> int:
        return len(self.steps) - 1

    @property
    def start(self) -> int:
        return self.steps[0]

    @property
    def end(self) -> int:
        return self.steps[-1]

    def at(self, t) -> int:
        return self.steps[grid_index(t, self.T)]

    def reversed(self) -> "DiscreteGeodesic":
        return DiscreteGeodesic(tuple(reversed(self.steps)), self.length)


def grid_index(t, T: int) -> int:
    """Return ``k`` with ``t == k / T``; raise :class:`GridError` otherwise."""
    if isinstance(t, float):
        ft = Fraction(t).limit_denominator(10**9)
        if abs(float(ft) - t) > 1e-12:
            raise GridError(f"time {t} is not representable on the 1/{T} grid")
    else:
        ft = Fraction(t)
    k = ft * T
    if k.denominator != 1 or not (0 <= k <= T):
        raise GridError(f"time {t} is not on the 1/{T} grid in [0,1]")
    return int(k)


def is_constant_speed(space: FiniteMMSpace, steps: Sequence[int], tol_geo: float = DEFAULT_TOL_GEO) -> bool:
    """Brute-force check of ``d(p_i,p_j) == |i-j|/T * d(p_0,p_T)`` over all pairs."""
    T = len(steps) - 1
    if T < 1:
        return False
    idx = np.asarray(steps)
    scaled = space.scaled_dist()
    if scaled is not None:
        D, _ = scaled
        sub = D[np.ix_(idx, idx)]
        L = int(D[idx[0], idx[-1]])
        k = np.arange(T + 1)
        return bool(np.all(sub * T == np.abs(k[:, None] - k[None, :]) * L))
    sub = space.float_dist()[np.ix_(idx, idx)]
    L = sub[0, -1]
    k = np.arange(T + 1)
    return bool(np.all(np.abs(sub - np.abs(k[:, None] - k[None, :]) * L / T) <= tol_geo))


def enumerate_geodesics(
    space: FiniteMMSpace, x: int, y: int, T: int, tol_geo: float = DEFAULT_TOL_GEO
) -> list:
    """All ``T``-step constant-speed sequences from ``x`` to ``y``.

    Candidates for step ``i`` are the points at distance ``i L / T`` from
    ``x`` and ``(T - i) L / T`` from ``y``; consecutive candidates are chained
    when one step apart, with the suffix lists memoized per (step, point).
    Given those two distance constraints the triangle inequality makes every
    chained sequence constant speed.  Result is sorted by index sequence; an
    empty list means the pair is not T-geodesic.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    n = space.n
    scaled = space.scaled_dist()
    if scaled is not None:
        D, q = scaled
        L = int(D[x, y])

        def layer(i):
            return np.nonzero((D[x] * T == i * L) & (D[:, y] * T == (T - i) * L))[0]

        def one_step(a):
            return D[a] * T == L
        length = space.dist[x, y]
    else:
        D = space.float_dist()
        L = D[x, y]

        def layer(i):
            return np.nonzero(
                (np.abs(D[x] - i * L / T) <= tol_geo) & (np.abs(D[:, y] - (T - i) * L / T) <= tol_geo)
            )[0]

        def one_step(a):
            return np.abs(D[a] - L / T) <= tol_geo
        length = float(L)

    if x == y:
        return [DiscreteGeodesic((x,) * (T + 1), length)]
    layers = [layer(i) for i in range(T + 1)]
    if x not in set(layers[0].tolist()) or y not in set(layers[T].tolist()):
        return []
    in_layer = [np.zeros(n, dtype=bool) for _ in range(T + 1)]
    for i, lay in enumerate(layers):
        in_layer[i][lay] = True
    memo: dict = {}

    def suffixes(i, p):
        key = (i, p)
        if key in memo:
            return memo[key]
        if i == T:
            res = [(p,)] if p == y else []
        else:
            nxt = np.nonzero(one_step(p) & in_layer[i + 1])[0]
            res = [(p,) + tail for c in nxt.tolist() for tail in suffixes(i + 1, c)]
        memo[key] = res
        return res

    seqs = sorted(suffixes(0, x))
    out = []
    for s in seqs:
        if not is_constant_speed(space, s, tol_geo):  # pragma: no cover - guarded by construction
            continue
        out.append(DiscreteGeodesic(s, length))
    return out


def restrict_geodesic(gamma: DiscreteGeodesic, s, t) -> DiscreteGeodesic:
    """``gamma`` restricted to ``[s, t]`` and reparametrized onto ``[0, 1]``.

    The result has resolution ``T (t - s)`` and length ``(t - s) l(gamma)``.
    """
    T = gamma.T
    ks, kt = grid_index(s, T), grid_index(t, T)
    if not ks < kt:
        raise GridError(f"restriction needs s < t, got s={s}, t={t}")
    frac = Fraction(kt - ks, T)
    length = gamma.length * frac if is_exact(gamma.length) else gamma.length * float(frac)
    return DiscreteGeodesic(gamma.steps[ks : kt + 1], length)


# -----------------------------------------------------------------------------
# JSON I/O
# -----------------------------------------------------------------------------
def number_to_json(x):
    if is_exact(x):
        f = Fraction(x)
        return int(f) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"
    return float(x)


def space_to_dict(space: FiniteMMSpace, metric_kind: str = "matrix") -> dict:
    points = []
    for i, pid in enumerate(space.point_ids):
        entry = {"id": pid}
        if space.labels is not None:
            entry["label"] = [number_to_json(c) for c in space.labels[i]]
        points.append(entry)
    if metric_kind == "norm":
        raise ValueError("use space_spec_to_dict for norm metrics")
    metric = {"kind": "matrix", "entries": [[number_to_json(v) for v in row] for row in space.dist]}
    return {"points": points, "metric": metric, "measure": [number_to_json(w) for w in space.m]}


def space_from_dict(data: dict) -> FiniteMMSpace:
    try:
        points = data["points"]
        metric = data["metric"]
    except KeyError as e:
        raise SpecError(f"space file missing key {e}") from None
    ids = [p["id"] for p in points]
    labels = None
    if all("label" in p for p in points) and points:
        labels = [tuple(to_number(c) for c in p["label"]) for p in points]
    n = len(ids)
    kind = metric.get("kind")
    if kind == "matrix":
        dist = as_matrix(metric["entries"])
    elif kind == "graph":
        pos = {pid: i for i, pid in enumerate(ids)}
        edges = [(pos[u], pos[v], w) for u, v, w in metric["edges"]]
        dist = shortest_path_matrix(n, edges)
    elif kind == "norm":
        if labels is None:
            raise SpecError("norm metric needs a label on every point")
        dist = norm_matrix(labels, metric.get("p", "inf"))
    else:
        raise SpecError(f"unknown metric kind {kind!r}")
    measure = _measure_weights(data.get("measure", "uniform"), n)
    return FiniteMMSpace(ids, dist, measure, labels=labels)


def save_space(space: FiniteMMSpace, path, norm=None) -> None:
    data = space_to_dict(space)
    if norm is not None:
        data["metric"] = {"kind": "norm", "p": str(norm)}
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def load_space(path) -> FiniteMMSpace:
    return space_from_dict(json.loads(Path(path).read_text()))
