from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdk_lab.branching import (
    PairMeasure,
    agreement_index,
    best_split,
    branching_profile,
    disagreement_set,
    find_branching_pairs,
    pair_product_measure,
    single_branch_normalize,
)
from cdk_lab.errors import NormalizationError, PreconditionError, SizeError
from cdk_lab.geoplans import GeodesicPlan, lift_plan
from cdk_lab.space import DiscreteGeodesic, dyadic_grid, enumerate_geodesics, path_graph
from cdk_lab.transport import ProbMeasure, solve_w2

from conftest import gp


def _geo(S, steps):
    return DiscreteGeodesic(tuple(steps), S.dist[steps[0], steps[-1]])


def _brute_split(mat):
    """Independent oracle: itertools over all subsets."""
    n = mat.shape[0]
    best = -1.0
    for r in range(1, n):
        for E in itertools.combinations(range(n), r):
            Ec = [b for b in range(n) if b not in E]
            best = max(best, float(mat[np.ix_(list(E), Ec)].sum()))
    return best


# -----------------------------------------------------------------------------
# pair-product measure and profile
# -----------------------------------------------------------------------------
def test_pair_product_single_atom():
    S = path_graph(3)
    g = _geo(S, (0, 1, 2))
    sigma = pair_product_measure(GeodesicPlan(S, [(g, Fraction(1))]), Fraction(1, 2))
    assert sigma.atoms == [((g, g), 1)]


def test_pair_product_shared_head(grid_quarter):
    S = grid_quarter
    a = _geo(S, [gp(S, 0, 0), gp(S, "1/4", 0), gp(S, "1/2", 0), gp(S, "3/4", 0), gp(S, 1, 0)])
    b = _geo(S, [gp(S, 0, 0), gp(S, "1/4", 0), gp(S, "1/2", 0), gp(S, "3/4", "1/4"), gp(S, 1, "1/2")])
    pi = GeodesicPlan(S, [(a, Fraction(1, 2)), (b, Fraction(1, 2))])
    sigma = pair_product_measure(pi, Fraction(1, 2))
    assert len(sigma.atoms) == 4 and all(m == Fraction(1, 4) for _, m in sigma.atoms)
    assert sigma.first_marginal() == {a: Fraction(1, 2), b: Fraction(1, 2)}
    assert sigma.second_marginal() == sigma.first_marginal()


def test_pair_product_different_heads():
    S = path_graph(5)
    plan, _ = solve_w2(ProbMeasure.uniform(S, [0, 1]), ProbMeasure.uniform(S, [2, 3]))
    pi = lift_plan(plan, 2)
    sigma = pair_product_measure(pi, Fraction(1, 2))
    assert len(sigma.atoms) == 2 and all(g1 == g2 for (g1, g2), _ in sigma.atoms)
    assert sigma.diagonal_mass == 1


def test_profile_all_diagonal():
    S = path_graph(5)
    pi = lift_plan(solve_w2(ProbMeasure.uniform(S, [0, 1]), ProbMeasure.uniform(S, [2, 3]))[0], 2)
    prof = branching_profile(pair_product_measure(pi, Fraction(1, 2)))
    assert prof.values == [1, 1, 1]


def test_profile_inclusive_convention(grid_quarter):
    S = grid_quarter
    a = _geo(S, [gp(S, 0, 0), gp(S, "1/4", 0), gp(S, "1/2", 0), gp(S, "3/4", 0), gp(S, 1, 0)])
    b = _geo(S, [gp(S, 0, 0), gp(S, "1/4", 0), gp(S, "1/2", 0), gp(S, "3/4", "1/4"), gp(S, 1, "1/2")])
    # half on the diagonal, half on the off-diagonal pairs splitting after t = 1/2
    sigma = PairMeasure([((a, a), Fraction(1, 4)), ((b, b), Fraction(1, 4)),
                         ((a, b), Fraction(1, 4)), ((b, a), Fraction(1, 4))], 4)
    prof = branching_profile(sigma)
    assert prof.values == [1, 1, 1, Fraction(1, 2), Fraction(1, 2)]
    assert prof.t_star == Fraction(1, 2) and prof.max_drop == Fraction(1, 2)
    assert prof.values[-1] == sigma.diagonal_mass


def test_pair_measure_validation():
    S = path_graph(3)
    g = _geo(S, (0, 1, 2))
    with pytest.raises(ValueError):
        PairMeasure([((g, g), Fraction(1, 2))], 2)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 3))
def test_pair_product_marginal_recovers_plan(seed, k):
    rng = np.random.default_rng(seed)
    S = dyadic_grid(5, Fraction(1, 4))
    src = [gp(S, 0, Fraction(int(y), 4)) for y in rng.choice(5, size=k, replace=False)]
    dst = [gp(S, 1, Fraction(int(y), 4)) for y in rng.choice(5, size=k, replace=False)]
    pi = lift_plan(solve_w2(ProbMeasure.uniform(S, src), ProbMeasure.uniform(S, dst))[0], 4)
    T_split = Fraction(int(rng.integers(1, 4)), 4)
    sigma = pair_product_measure(pi, T_split)
    assert sigma.first_marginal() == dict(pi.atoms)
    assert sigma.second_marginal() == dict(pi.atoms)
    prof = branching_profile(sigma)
    assert prof.values[0] == 1
    assert all(x >= y for x, y in zip(prof.values, prof.values[1:]))
    k_split = int(T_split * 4)
    assert all(v == 1 for v in prof.values[: k_split + 1])
    assert prof.values[-1] == sigma.diagonal_mass


# -----------------------------------------------------------------------------
# branching detection
# -----------------------------------------------------------------------------
def test_path_lift_not_branching():
    S = path_graph(6)
    plan, _ = solve_w2(ProbMeasure.uniform(S, [0, 1, 2]), ProbMeasure.uniform(S, [2, 3, 4]))
    rep = find_branching_pairs(lift_plan(plan, 2, "lex_min"))
    assert rep.essentially_nonbranching and rep.pairs == []


def test_grid_uniform_lift_branches(grid_quarter):
    S = grid_quarter
    plan, _ = solve_w2(ProbMeasure.dirac(S, gp(S, 0, 0)), ProbMeasure.dirac(S, gp(S, 1, 0)))
    pi = lift_plan(plan, 4)
    rep = find_branching_pairs(pi)
    assert not rep.essentially_nonbranching
    via = [p for p in rep.pairs
           if pi.geodesics[p.i].steps[1] == gp(S, "1/4", 0) == pi.geodesics[p.j].steps[1]]
    assert via and min(p.t_branch for p in via) == Fraction(1, 4)
    assert rep.profile.values[0] == 1 and rep.diagonal_mass < 1


def test_divergence_at_first_step_is_not_branching(grid_half):
    S = grid_half
    plan, _ = solve_w2(ProbMeasure.dirac(S, gp(S, 0, 0)), ProbMeasure.dirac(S, gp(S, 1, 0)))
    pi = lift_plan(plan, 2)
    assert len(pi.atoms) == 2
    assert find_branching_pairs(pi).essentially_nonbranching


def test_branch_report_json():
    S = path_graph(3)
    rep = find_branching_pairs(GeodesicPlan(S, [(_geo(S, (0, 1, 2)), Fraction(1))]))
    d = rep.to_dict()
    assert d["essentially_nonbranching"] and d["pairs"] == [] and len(d["profile"]) == 3


# -----------------------------------------------------------------------------
# best split
# -----------------------------------------------------------------------------
def test_split_two_points():
    res = best_split({("a", "b"): Fraction(1)})
    assert res.E == ("a",) and res.value == 1


def test_split_three_uniform():
    sigma = {(a, b): Fraction(1, 6) for a in range(3) for b in range(3) if a != b}
    res = best_split(sigma)
    assert res.value == Fraction(1, 3)
    assert len(res.E) == 1


@pytest.mark.parametrize("seed", range(3))
def test_split_four_random_exceeds_quarter(seed):
    rng = np.random.default_rng(seed)
    for _ in range(500):
        mat = rng.random((4, 4))
        np.fill_diagonal(mat, 0)
        mat /= mat.sum()
        res = best_split(mat)
        assert res.value > 0.25
        assert abs(float(res.value) - _brute_split(mat)) <= 1e-12


def test_split_errors():
    with pytest.raises(PreconditionError):
        best_split({(0, 0): Fraction(1, 2), (0, 1): Fraction(1, 2)})
    with pytest.raises(SizeError):
        best_split(np.ones((5, 5)) - np.eye(5), cap=4)
    with pytest.raises(PreconditionError):
        best_split(np.zeros((1, 1)))


def test_split_tie_goes_to_lowest_mask():
    mat = np.ones((3, 3)) - np.eye(3)
    assert best_split(mat).E == (0,)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 10))
def test_split_bound_and_mean(seed, n):
    rng = np.random.default_rng(seed)
    mat = rng.random((n, n)) * (rng.random((n, n)) < 0.7)
    np.fill_diagonal(mat, 0)
    if mat.sum() == 0:
        mat[0, 1] = 1.0
    mat /= mat.sum()
    res = best_split(mat)
    assert float(res.value) >= res.bound - 1e-12 and float(res.value) > 0.25
    assert abs(res.mean - 2 ** (n - 2) / (2**n - 2)) <= 1e-12
    if n <= 7:
        assert abs(float(res.value) - _brute_split(mat)) <= 1e-12


def test_split_on_pair_measure_off_diagonal(grid_quarter):
    S = grid_quarter
    plan, _ = solve_w2(ProbMeasure.dirac(S, gp(S, 0, 0)), ProbMeasure.dirac(S, gp(S, 1, 0)))
    sigma = pair_product_measure(lift_plan(plan, 4), Fraction(1, 4))
    off = sigma.off_diagonal()
    total = sum(off.values())
    res = best_split({k: v / total for k, v in off.items()})
    assert res.value > Fraction(1, 4)


# -----------------------------------------------------------------------------
# single-branch normalization
# -----------------------------------------------------------------------------
def _grid8():
    return dyadic_grid(9, Fraction(1, 8))


def test_normalize_equal_endpoints_two_intervals():
    S = _grid8()
    h = Fraction(1, 8)
    g1 = _geo(S, [gp(S, k * h, 0) for k in range(9)])
    ys = [0, 0, 0, h, 0, 0, 0, h, 0]  # differs at 3/8 and 7/8
    g2 = _geo(S, [gp(S, k * h, ys[k]) for k in range(9)])
    g3, g4 = single_branch_normalize(S, g1, g2, Fraction(1, 4))
    assert g3 == g1
    assert disagreement_set(g3, g4) == [3]
    assert g4.start == g1.start and g4.end == g2.end and g4.length == g1.length


def test_normalize_distinct_endpoints():
    S = _grid8()
    h = Fraction(1, 8)
    g1 = _geo(S, [gp(S, k * h, 0) for k in range(9)])
    ys = [0, 0, h, 0, 0, 0, h, 2 * h, 3 * h]  # leaves, returns, then leaves for good
    g2 = _geo(S, [gp(S, k * h, ys[k]) for k in range(9)])
    g3, g4 = single_branch_normalize(S, g1, g2, Fraction(1, 8))
    assert disagreement_set(g3, g4) == [6, 7, 8]
    assert g4.end == g2.end and g4.start == g1.start


def test_normalize_already_single_and_identity():
    S = _grid8()
    h = Fraction(1, 8)
    g1 = _geo(S, [gp(S, k * h, 0) for k in range(9)])
    ys = [0, 0, 0, 0, 0, 0, h, 2 * h, 3 * h]
    g2 = _geo(S, [gp(S, k * h, ys[k]) for k in range(9)])
    assert single_branch_normalize(S, g1, g2) == (g1, g2)
    assert single_branch_normalize(S, g1, g1) == (g1, g1)


def test_normalize_precondition_and_failure():
    S = _grid8()
    h = Fraction(1, 8)
    g1 = _geo(S, [gp(S, k * h, 0) for k in range(9)])
    g2 = _geo(S, [gp(S, k * h, h if k == 1 else 0) for k in range(9)])
    with pytest.raises(PreconditionError):
        single_branch_normalize(S, g1, g2, Fraction(1, 4))
    # on a cycle graph the splice of two arcs is not a geodesic
    from cdk_lab.space import SpaceGenSpec, build_space

    C = build_space(SpaceGenSpec("graph", edges=[(i, (i + 1) % 6, 1) for i in range(6)], n_nodes=6))
    a = DiscreteGeodesic((0, 1, 2), 2)
    b = DiscreteGeodesic((0, 1, 0), 0)  # not a geodesic itself; forces a bad splice
    with pytest.raises(NormalizationError):
        single_branch_normalize(C, a, b)


def test_agreement_index():
    assert agreement_index(DiscreteGeodesic((0, 1, 2), 2), DiscreteGeodesic((1, 1, 2), 2)) == -1
    assert agreement_index(DiscreteGeodesic((0, 1, 2), 2), DiscreteGeodesic((0, 1, 2), 2)) == 2
