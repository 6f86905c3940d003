"""Recursive rank matching: fast surrogates for the 2-Wasserstein distance.

The package matches equal-size, uniformly weighted point clouds by ordering
each cloud along a mass-median recursive partition (the tree-curve order) and
pairing points rank by rank.  On top of that primitive it provides multi-run
plan merging, the selective screening pipeline with exact finalization, and
the last-mile / convergence diagnostics.
"""

from rrmatch.core import (
    UNASSIGNED,
    AffineMap,
    CapExceededError,
    DataFormatError,
    InvalidCloudError,
    Plan,
    PointCloud,
    SizeMismatchError,
    derive_rng,
    derive_seed,
    load_point_cloud,
    normalize_unit_box,
    plan_squared_cost,
    save_point_cloud,
)
from rrmatch.diagnostics import (
    LastMileParams,
    LastMileReport,
    UniformPopulation,
    anchored_rrm_uniform,
    calibrated_depth,
    convergence_experiment,
    nn_baseline,
    plateau_decomposition,
    premature_set,
    threshold_consistency_experiment,
)
from rrmatch.matching import (
    CostKind,
    RunVariant,
    exact_w2,
    hungarian,
    merge_pair,
    merged_rrm,
    plan_value,
    rrm_distance,
    rrm_plan,
    squared_distance_matrix,
)
from rrmatch.partition import (
    Address,
    AxisSchedule,
    PartitionTree,
    build_tree,
    common_prefix_depth,
    empirical_threshold_vector,
    tree_curve_order,
)
from rrmatch.srrm import (
    SrrmConfig,
    SrrmResult,
    finalize_hungarian,
    sample_near,
    select,
    srrm_match,
)

__version__ = "0.1.0"

__all__ = [
    "UNASSIGNED",
    "AffineMap",
    "Address",
    "AxisSchedule",
    "CapExceededError",
    "CostKind",
    "DataFormatError",
    "InvalidCloudError",
    "LastMileParams",
    "LastMileReport",
    "PartitionTree",
    "Plan",
    "PointCloud",
    "RunVariant",
    "SizeMismatchError",
    "SrrmConfig",
    "SrrmResult",
    "UniformPopulation",
    "anchored_rrm_uniform",
    "build_tree",
    "calibrated_depth",
    "common_prefix_depth",
    "convergence_experiment",
    "derive_rng",
    "derive_seed",
    "empirical_threshold_vector",
    "exact_w2",
    "finalize_hungarian",
    "hungarian",
    "load_point_cloud",
    "merge_pair",
    "merged_rrm",
    "nn_baseline",
    "normalize_unit_box",
    "plan_squared_cost",
    "plan_value",
    "plateau_decomposition",
    "premature_set",
    "rrm_distance",
    "rrm_plan",
    "sample_near",
    "save_point_cloud",
    "select",
    "squared_distance_matrix",
    "srrm_match",
    "threshold_consistency_experiment",
    "tree_curve_order",
]
