from __future__ import annotations

from fractions import Fraction

import sys

import numpy as np
import pytest

from cdk_lab.space import SpaceGenSpec, build_space, dyadic_grid, grid_point, path_graph
from cdk_lab.transport import ProbMeasure


def random_exact_measure(space, rng, support_size):
    """Rational weights on a random support of the given size."""
    pts = sorted(rng.choice(space.n, size=support_size, replace=False).tolist())
    raw = rng.integers(1, 9, size=support_size)
    total = int(raw.sum())
    return ProbMeasure.from_masses(space, {p: Fraction(int(r), total) for p, r in zip(pts, raw)})


def random_float_measure(space, rng, support_size):
    pts = sorted(rng.choice(space.n, size=support_size, replace=False).tolist())
    raw = rng.random(support_size) + 0.05
    raw = raw / raw.sum()
    # the last weight absorbs rounding so the total is 1 to machine precision
    raw[-1] = 1.0 - raw[:-1].sum()
    return ProbMeasure.from_masses(space, {p: float(r) for p, r in zip(pts, raw)})


def random_graph_space(rng, n):
    """Connected random graph with integer edge weights."""
    edges = [(i, int(rng.integers(0, i)), int(rng.integers(1, 4))) for i in range(1, n)]
    for _ in range(int(rng.integers(0, n))):
        u, v = rng.choice(n, size=2, replace=False).tolist()
        edges.append((u, v, int(rng.integers(1, 4))))
    return build_space(SpaceGenSpec("graph", edges=edges, n_nodes=n))


def random_float_space(rng, n):
    pts = rng.random((n, 2))
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    dist = dist + np.sqrt(2.0) * 1e-3 * (1 - np.eye(n))  # keep it firmly non-dyadic
    return build_space(SpaceGenSpec("explicit", matrix=dist.tolist()))


def star_graph(leaves=4):
    return build_space(SpaceGenSpec("graph", edges=[(0, i, 1) for i in range(1, leaves + 1)], n_nodes=leaves + 1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid_half():
    """{0, 1/2, 1}^2 with the l-infinity distance."""
    return dyadic_grid(3, Fraction(1, 2))


@pytest.fixture
def grid_quarter():
    return dyadic_grid(5, Fraction(1, 4))


@pytest.fixture
def path5():
    return path_graph(5)


def gp(space, x, y):
    return grid_point(space, Fraction(x), Fraction(y))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda x: int(x.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
