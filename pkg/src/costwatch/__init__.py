"""Hierarchical claims cost surveillance: KPI roll-ups, CUSUM detection,
impact attribution and utilization-offset estimation."""

from .impact import ImpactConfig, decompose_multi_factor, decompose_series, decompose_two_factor, ewa, total_impact
from .kpi import KpiSeries, Panel, aggregate, derive_ratio, qualify
from .offsets import ComparabilityKB, OffsetNetwork, migration_oracle, offset_cost_impact, solve_migration
from .records import ClaimRecord, EnrollmentRecord, InputError, ViewpointKey, ViewpointSpec
from .spc import NullModelSpec, ThresholdSet, build_change_series, learn_thresholds, run_cusum

__version__ = "0.1.0"

__all__ = [
    "ClaimRecord",
    "ComparabilityKB",
    "EnrollmentRecord",
    "ImpactConfig",
    "InputError",
    "KpiSeries",
    "NullModelSpec",
    "OffsetNetwork",
    "Panel",
    "ThresholdSet",
    "ViewpointKey",
    "ViewpointSpec",
    "aggregate",
    "build_change_series",
    "decompose_multi_factor",
    "decompose_series",
    "decompose_two_factor",
    "derive_ratio",
    "ewa",
    "learn_thresholds",
    "migration_oracle",
    "offset_cost_impact",
    "qualify",
    "run_cusum",
    "solve_migration",
    "total_impact",
]
