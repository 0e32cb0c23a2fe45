"""Assign flagged impact records to reporting categories."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .impact import ImpactRecord

CATEGORIES = ("declining_cost", "rare_diseases", "pharmacy_drug", "condition_management", "system_improvement")


@dataclass(frozen=True)
class CategoryRules:
    order: tuple[str, ...] = CATEGORIES
    rarity_threshold: float = 5e-4  # prevalence per member-month
    pharmacy_claim_types: tuple[str, ...] = ("pharmacy",)
    system_claim_types: tuple[str, ...] = ("inpatient", "outpatient")
    system_dimensions: tuple[str, ...] = ("procedure_group", "place_of_service")
    prevalence_factor: str = "prevalence"

    def __post_init__(self):
        unknown = set(self.order) - set(CATEGORIES)
        if unknown:
            raise ValueError(f"unknown categories in rule order: {sorted(unknown)}")
        if len(set(self.order)) != len(self.order):
            raise ValueError("category order has duplicates")
        if self.rarity_threshold < 0:
            raise ValueError("rarity_threshold must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "CategoryRules":
        d = dict(d or {})
        for name in ("order", "pharmacy_claim_types", "system_claim_types", "system_dimensions"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "order": list(self.order),
            "rarity_threshold": self.rarity_threshold,
            "pharmacy_claim_types": list(self.pharmacy_claim_types),
            "system_claim_types": list(self.system_claim_types),
            "system_dimensions": list(self.system_dimensions),
            "prevalence_factor": self.prevalence_factor,
        }


def _condition_rooted(record: ImpactRecord) -> bool:
    return bool(record.key.path) and record.key.path[0][0] == "condition"


def _prevalence_dominated(record: ImpactRecord, factor: str) -> bool:
    leaves = record.decomposition.leaves() if record.decomposition is not None else []
    if not leaves:
        return False
    top = max(leaves, key=lambda n: abs(n.I))
    return top.factor_name == factor


def _matches(name: str, record: ImpactRecord, rules: CategoryRules, prevalence: float) -> bool:
    I = record.total_impact
    key = record.key
    if name == "declining_cost":
        return I < 0
    if not I > 0:
        return False
    if name == "rare_diseases":
        return _condition_rooted(record) and np.isfinite(prevalence) and prevalence < rules.rarity_threshold
    if name == "pharmacy_drug":
        return key.get("claim_type") in rules.pharmacy_claim_types
    if name == "condition_management":
        return _condition_rooted(record) and _prevalence_dominated(record, rules.prevalence_factor)
    if name == "system_improvement":
        dims = {d for d, _ in key.path}
        return key.get("claim_type") in rules.system_claim_types or bool(dims & set(rules.system_dimensions))
    raise ValueError(name)


def categorize(record: ImpactRecord, rules: CategoryRules | None = None, prevalence: float = float("nan")) -> str:
    """First matching category under ``rules``.

    ``prevalence`` is the key's baseline prevalence level, used only by the
    rarity rule. Records no rule claims fall back on the key's root.
    """
    rules = rules or CategoryRules()
    for name in rules.order:
        if _matches(name, record, rules, prevalence):
            return name
    return "condition_management" if _condition_rooted(record) else "system_improvement"
