"""Finite-scale laboratory for curvature-dimension bounds and branching.

Metric measure spaces on finitely many points, exact optimal transport,
discrete geodesic plans, entropy convexity checks, branching detection and
the plan-mixing construction, all usable from Python or the ``cdk-lab`` CLI.
"""
from __future__ import annotations

from cdk_lab.branching import (
    BranchReport,
    PairMeasure,
    best_split,
    branching_profile,
    find_branching_pairs,
    pair_product_measure,
    single_branch_normalize,
)
from cdk_lab.entropy import (
    Log2DemoConfig,
    certify_strong_cd,
    check_k_convexity,
    entropy,
    length_bound,
    log2_drop_experiment,
)
from cdk_lab.errors import CdkLabError
from cdk_lab.geoplans import (
    GeodesicPlan,
    evaluate_at,
    is_wasserstein_geodesic,
    lift_plan,
    restrict_time,
    reweight,
    time_reverse,
)
from cdk_lab.mixing import (
    certify_unique_optimal,
    is_induced_by_map,
    mix_plans,
    split_and_disintegrate,
    verify_length_equality,
)
from cdk_lab.space import (
    DiscreteGeodesic,
    FiniteMMSpace,
    SpaceGenSpec,
    build_space,
    check_metric,
    dyadic_grid,
    enumerate_geodesics,
    grid_point,
    path_graph,
)
from cdk_lab.transport import (
    ProbMeasure,
    TransportPlan,
    brute_force_w2,
    check_cyclical_monotonicity,
    restrict_plan,
    solve_w2,
)

__version__ = "0.1.0"

