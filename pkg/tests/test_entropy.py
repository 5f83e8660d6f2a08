from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdk_lab.entropy import (
    LOG2,
    ConstructionError,
    Log2DemoConfig,
    certify_strong_cd,
    check_k_convexity,
    entropy,
    length_bound,
    log2_drop_experiment,
    log2_families,
    windowed_k_convexity,
)
from cdk_lab.geoplans import GeodesicPlan, evaluate_at, lift_plan, restrict_time
from cdk_lab.space import DiscreteGeodesic, FiniteMMSpace, SpaceGenSpec, build_space, path_graph
from cdk_lab.transport import ProbMeasure, solve_w2

from conftest import gp, star_graph


# -----------------------------------------------------------------------------
# entropy
# -----------------------------------------------------------------------------
@pytest.mark.parametrize("k", [1, 2, 3, 5])
def test_uniform_entropy(k):
    S = path_graph(6)
    assert math.isclose(entropy(ProbMeasure.uniform(S, range(k))).value, -math.log(k), abs_tol=1e-15)


def test_dirac_entropy_zero():
    S = path_graph(3)
    assert entropy(ProbMeasure.dirac(S, 1)).value == 0


def test_entropy_relative_to_weights():
    S = FiniteMMSpace([0, 1], [[0, 1], [1, 0]], [2, Fraction(1, 2)])
    mu = ProbMeasure(S, [Fraction(1, 2), Fraction(1, 2)])
    # rho = (1/4, 1); Ent = 2 * 1/4 log 1/4 + 1/2 * 1 * log 1
    assert math.isclose(entropy(mu).value, 0.5 * math.log(0.25), abs_tol=1e-15)


def test_entropy_infinite_off_reference():
    S = path_graph(2)
    mu = ProbMeasure.dirac(S, 1)
    e = entropy(mu, m=np.array([1.0, 0.0]))
    assert not e.finite and e.value == math.inf


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_mixture_identity_for_singular_pairs(seed):
    rng = np.random.default_rng(seed)
    S = path_graph(10)
    pts = rng.permutation(10)
    k = int(rng.integers(1, 9))
    a_pts, b_pts = pts[:k], pts[k:]
    wa, wb = rng.random(len(a_pts)) + 0.1, rng.random(len(b_pts)) + 0.1
    a = ProbMeasure.from_masses(S, dict(zip(a_pts.tolist(), (wa / wa.sum()).tolist())))
    b = ProbMeasure.from_masses(S, dict(zip(b_pts.tolist(), (wb / wb.sum()).tolist())))
    mix = ProbMeasure(S, 0.5 * a.weights.astype(float) + 0.5 * b.weights.astype(float))
    lhs = entropy(mix).value
    rhs = 0.5 * entropy(a).value + 0.5 * entropy(b).value - math.log(2)
    assert abs(lhs - rhs) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_jensen_bound(seed):
    rng = np.random.default_rng(seed)
    m = rng.random(6) + 0.2
    S = FiniteMMSpace(list(range(6)), np.ones((6, 6)) - np.eye(6), m)
    k = int(rng.integers(1, 7))
    supp = sorted(rng.choice(6, size=k, replace=False).tolist())
    w = rng.random(k) + 0.1
    mu = ProbMeasure.from_masses(S, dict(zip(supp, (w / w.sum()).tolist())))
    bound = -math.log(m[supp].sum())
    assert entropy(mu).value >= bound - 1e-12
    flat = ProbMeasure.from_masses(S, {p: m[p] / m[supp].sum() for p in supp})
    assert abs(entropy(flat).value - bound) <= 1e-12


# -----------------------------------------------------------------------------
# K-convexity
# -----------------------------------------------------------------------------
def test_single_atom_constant_entropy():
    S = path_graph(3)
    pi = GeodesicPlan(S, [(DiscreteGeodesic((0, 1, 2), Fraction(2)), Fraction(1))])
    rep = check_k_convexity(pi)
    assert rep.passed and rep.entropies == [0.0, 0.0, 0.0]


def test_translation_on_path():
    S = path_graph(7)
    plan, _ = solve_w2(ProbMeasure.uniform(S, [0, 1, 2]), ProbMeasure.uniform(S, [2, 3, 4]))
    rep = check_k_convexity(lift_plan(plan, 2))
    assert all(math.isclose(e, -math.log(3), abs_tol=1e-15) for e in rep.entropies)
    assert abs(rep.worst_slack) <= 1e-15 and rep.passed


def test_concentration_fails_convexity():
    # two atoms collapsing onto one midpoint on a star
    S = star_graph(4)
    pi = GeodesicPlan(S, [(DiscreteGeodesic((1, 0, 3), Fraction(2)), Fraction(1, 2)),
                          (DiscreteGeodesic((2, 0, 4), Fraction(2)), Fraction(1, 2))])
    rep = check_k_convexity(pi)
    assert not rep.passed
    assert math.isclose(rep.worst_slack, LOG2, abs_tol=1e-12) and rep.worst_time == Fraction(1, 2)


def test_monotone_in_K():
    S = star_graph(4)
    pi = GeodesicPlan(S, [(DiscreteGeodesic((1, 0, 3), Fraction(2)), Fraction(1, 2)),
                          (DiscreteGeodesic((2, 0, 4), Fraction(2)), Fraction(1, 2))])
    slacks = [check_k_convexity(pi, K).worst_slack for K in (-2.0, -1.0, 0.0, 1.0, 2.0)]
    assert slacks == sorted(slacks)
    # W2^2 = 4, so the midpoint slack is ln 2 + K/2, which vanishes at K = -2 ln 2
    K_star = -2 * LOG2
    assert abs(check_k_convexity(pi, K_star).slacks[1]) <= 1e-12


def test_permutation_invariance(rng):
    S = path_graph(6)
    plan, _ = solve_w2(ProbMeasure.uniform(S, [0, 2]), ProbMeasure.uniform(S, [3, 5]))
    base = check_k_convexity(lift_plan(plan, 1)).worst_slack
    perm = rng.permutation(6)
    inv = np.argsort(perm)
    D = S.dist[np.ix_(perm, perm)]
    S2 = FiniteMMSpace([S.point_ids[p] for p in perm], D, S.m[perm])
    mu0 = ProbMeasure.uniform(S2, sorted([int(inv[0]), int(inv[2])]))
    mu1 = ProbMeasure.uniform(S2, sorted([int(inv[3]), int(inv[5])]))
    plan2, _ = solve_w2(mu0, mu1)
    assert check_k_convexity(lift_plan(plan2, 1)).worst_slack == base


def test_windowed_matches_full_on_short_plans():
    S = path_graph(5)
    plan, _ = solve_w2(ProbMeasure.uniform(S, [0, 1]), ProbMeasure.uniform(S, [2, 3]))
    pi = lift_plan(plan, 2)
    rep, window = windowed_k_convexity(pi)
    assert window == (0, 1) and rep.passed


# -----------------------------------------------------------------------------
# strong CD certification
# -----------------------------------------------------------------------------
def test_strong_cd_path_passes():
    S = path_graph(6)
    rep = certify_strong_cd(S, ProbMeasure.uniform(S, [0, 1, 2]), ProbMeasure.uniform(S, [3, 4, 5]), T=1)
    assert rep.passed and rep.qualifier == "exhaustive"
    S = path_graph(5)
    rep = certify_strong_cd(S, ProbMeasure.uniform(S, [0, 2]), ProbMeasure.uniform(S, [2, 4]), T=2, samples=20)
    assert rep.passed


def test_strong_cd_equal_measures():
    S = path_graph(4)
    mu = ProbMeasure.uniform(S, [0, 3])
    rep = certify_strong_cd(S, mu, mu, T=2, samples=5)
    assert rep.passed and rep.worst_slack == 0


def test_strong_cd_grid_branching_fails(grid_quarter):
    S = grid_quarter
    rep = certify_strong_cd(S, ProbMeasure.dirac(S, gp(S, 0, 0)),
                            ProbMeasure.uniform(S, [gp(S, 1, 0), gp(S, 1, "1/2")]), T=4)
    assert not rep.passed and rep.witness is not None
    assert rep.witness_report.worst_slack > 0.3
    # the witness concentrates both branches on a common head
    heads = {g.steps[:2] for g in rep.witness.geodesics}
    assert len(heads) == 1


def test_strong_cd_star_fails():
    S = star_graph(4)
    rep = certify_strong_cd(S, ProbMeasure.uniform(S, [1, 2]), ProbMeasure.uniform(S, [3, 4]), T=2)
    assert not rep.passed and math.isclose(rep.worst_slack, LOG2, abs_tol=1e-12)


def test_strong_cd_budget_qualifier():
    S = build_space(SpaceGenSpec("grid", side=3, step="1/2", norm="inf"))
    rep = certify_strong_cd(S, ProbMeasure.dirac(S, gp(S, 0, 0)),
                            ProbMeasure.uniform(S, [gp(S, 1, 0), gp(S, 1, 1)]), T=2, budget=1, samples=0, K=-100)
    assert rep.passed and rep.qualifier == "sampled"


# -----------------------------------------------------------------------------
# log-2 demo
# -----------------------------------------------------------------------------
def test_log2_demo_default():
    rep = log2_drop_experiment()
    assert rep.drop_error <= 1e-9 and rep.head_drop <= 1e-12
    assert rep.passed and not rep.cd_verdict
    # independent closed form: the worst window is [0, t2] where the mixture
    # slack equals log 2 * t1 / t2
    assert math.isclose(rep.slack, LOG2 * 13 / 14, abs_tol=1e-12)
    assert rep.slack >= LOG2 - 0.1
    assert rep.slack_window == (0, Fraction(7, 8))


def test_log2_drop_profile():
    cfg = Log2DemoConfig()
    rep = log2_drop_experiment(cfg)
    k1, k2 = cfg.validate()
    for k, d in enumerate(rep.drops):
        if k <= k1:
            assert abs(d) <= 1e-12
        if k >= k2:
            assert abs(d - LOG2) <= 1e-12


def test_log2_families_structure():
    cfg = Log2DemoConfig()
    space, up, down = log2_families(cfg)
    assert restrict_time(up, 0, cfg.t1).atoms == restrict_time(down, 0, cfg.t1).atoms
    s = Fraction(7, 8)
    assert not set(evaluate_at(up, s).support) & set(evaluate_at(down, s).support)


def test_log2_config_errors():
    with pytest.raises(ConstructionError):
        Log2DemoConfig(t1=Fraction(1, 2), t2=Fraction(1, 4)).validate()
    with pytest.raises(ConstructionError):
        Log2DemoConfig(family_size=9).validate()


@pytest.mark.parametrize("t1,t2", [("1/4", "3/8"), ("1/2", "5/8"), ("3/4", "7/8")])
def test_log2_demo_other_windows(t1, t2):
    rep = log2_drop_experiment(Log2DemoConfig(t1=Fraction(t1), t2=Fraction(t2)))
    assert rep.drop_error <= 1e-9
    assert math.isclose(rep.slack, LOG2 * Fraction(t1) / Fraction(t2), abs_tol=1e-12)


def test_length_bound():
    assert math.isclose(length_bound(0), math.sqrt(math.log(2)), rel_tol=1e-15)
    assert round(length_bound(0), 4) == 0.8326
    assert length_bound(-1) == length_bound(1) == math.sqrt(math.log(2) / 7)
    vals = [length_bound(k) for k in (0, 1, 10, 100, 1e6)]
    assert vals == sorted(vals, reverse=True) and vals[-1] < 1e-3
