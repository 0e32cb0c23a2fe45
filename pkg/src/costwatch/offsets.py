"""Utilization offsets among comparable treatments.

A network links originators (treatments whose use fell) to comparable
receivers (whose use rose). Migration volumes follow two proportional
allocation rules and are pushed as high as the receivers' observed
increases allow.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .impact import ewa
from .records import InputError, ViewpointKey
from .spc import DetectionResult, confidence_at_least


@dataclass(frozen=True)
class ComparabilityGroup:
    group_id: str
    members: tuple[str, ...]
    condition: str | None = None
    dimension: str | None = None
    exclusions: frozenset[frozenset[str]] = frozenset()

    def allows(self, a: str, b: str) -> bool:
        return frozenset((a, b)) not in self.exclusions


@dataclass(frozen=True)
class ComparabilityKB:
    """File-backed stand-in for a drug-comparability knowledge base.

    Members are leaf codes (for example product names) optionally tied
    to a dimension; a group with a ``condition`` only matches keys under
    that condition.
    """

    groups: tuple[ComparabilityGroup, ...]
    provenance: str = ""

    def __post_init__(self):
        ids = set()
        for g in self.groups:
            if g.group_id in ids:
                raise InputError(f"duplicate KB group {g.group_id!r}")
            ids.add(g.group_id)
            if len(g.members) < 2:
                raise InputError(f"KB group {g.group_id!r} needs at least two members")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ComparabilityKB":
        groups = []
        for g in doc.get("groups", []):
            excl = frozenset(frozenset(map(str, pair)) for pair in g.get("exclusions", []) or [])
            groups.append(
                ComparabilityGroup(
                    group_id=str(g["group_id"]),
                    members=tuple(str(m) for m in g["members"]),
                    condition=g.get("condition") or None,
                    dimension=g.get("dimension") or None,
                    exclusions=excl,
                )
            )
        return cls(groups=tuple(groups), provenance=str(doc.get("provenance", "")))

    @classmethod
    def load(cls, path: str | Path) -> "ComparabilityKB":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "groups": [
                {
                    "group_id": g.group_id,
                    "condition": g.condition,
                    "dimension": g.dimension,
                    "members": list(g.members),
                    "exclusions": sorted(sorted(p) for p in g.exclusions),
                }
                for g in self.groups
            ],
        }


@dataclass(frozen=True)
class OffsetNetwork:
    network_id: str
    originators: tuple[str, ...]
    outflow: tuple[float, ...]
    receivers: tuple[str, ...]
    inflow: tuple[float, ...]
    adjacency: tuple[tuple[int, ...], ...]
    window: range = range(0)
    keys: Mapping[str, ViewpointKey] = field(default_factory=dict)

    def validate(self) -> None:
        if len(self.originators) != len(self.outflow) or len(self.receivers) != len(self.inflow):
            raise ValueError(f"{self.network_id}: capacity vectors do not match node lists")
        if not self.originators or not self.receivers:
            raise ValueError(f"{self.network_id}: network needs originators and receivers")
        if set(self.originators) & set(self.receivers):
            raise ValueError(f"{self.network_id}: originator and receiver sets overlap")
        if any(not o > 0 for o in self.outflow) or any(not r > 0 for r in self.inflow):
            raise ValueError(f"{self.network_id}: capacities must be positive")
        if len(self.adjacency) != len(self.originators):
            raise ValueError(f"{self.network_id}: adjacency needs one row per originator")
        for i, row in enumerate(self.adjacency):
            if not row:
                raise ValueError(f"{self.network_id}: originator {self.originators[i]} has no receiver")
            if any(j < 0 or j >= len(self.receivers) for j in row):
                raise ValueError(f"{self.network_id}: adjacency index out of range")
            if len(set(row)) != len(row):
                raise ValueError(f"{self.network_id}: repeated receiver in adjacency")

    @classmethod
    def complete(cls, outflow: Sequence[float], inflow: Sequence[float], network_id: str = "net") -> "OffsetNetwork":
        I, J = len(outflow), len(inflow)
        return cls(
            network_id=network_id,
            originators=tuple(f"O{i + 1}" for i in range(I)),
            outflow=tuple(float(o) for o in outflow),
            receivers=tuple(f"R{j + 1}" for j in range(J)),
            inflow=tuple(float(r) for r in inflow),
            adjacency=tuple(tuple(range(J)) for _ in range(I)),
        )

    def scaled(self, lam: float) -> "OffsetNetwork":
        return OffsetNetwork(
            self.network_id,
            self.originators,
            tuple(lam * o for o in self.outflow),
            self.receivers,
            tuple(lam * r for r in self.inflow),
            self.adjacency,
            self.window,
            self.keys,
        )


@dataclass(frozen=True)
class MigrationResult:
    network: OffsetNetwork
    total: float
    outflow: np.ndarray
    inflow: np.ndarray
    flows: np.ndarray

    def to_dict(self) -> dict:
        net = self.network
        return {
            "network_id": net.network_id,
            "P_m": self.total,
            "originators": [
                {"treatment": o, "capacity": c, "outflow": float(m)}
                for o, c, m in zip(net.originators, net.outflow, self.outflow)
            ],
            "receivers": [
                {"treatment": r, "capacity": c, "inflow": float(m)}
                for r, c, m in zip(net.receivers, net.inflow, self.inflow)
            ],
            "flows": [
                {"from": net.originators[i], "to": net.receivers[j], "volume": float(self.flows[i, j])}
                for i in range(len(net.originators))
                for j in range(len(net.receivers))
                if self.flows[i, j] != 0
            ],
        }


def _allocate(net: OffsetNetwork, total: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Outflows, flow matrix and inflows implied by a migration total."""
    o = np.asarray(net.outflow, dtype=float)
    r = np.asarray(net.inflow, dtype=float)
    out = total * o / o.sum()
    flows = np.zeros((len(o), len(r)))
    for i, row in enumerate(net.adjacency):
        idx = list(row)
        flows[i, idx] = out[i] * r[idx] / r[idx].sum()
    return out, flows, flows.sum(axis=0)


def solve_migration(net: OffsetNetwork) -> MigrationResult:
    """Maximum migration consistent with proportional allocation.

    With ``W(i)`` the total inflow capacity reachable from originator
    ``i``, receiver ``j`` caps the migration total at
    ``1 / sum_{i -> j} o_i / (W(i) * sum(o))``; the total is the smallest
    such cap or ``sum(o)``.
    """
    net.validate()
    o = np.asarray(net.outflow, dtype=float)
    r = np.asarray(net.inflow, dtype=float)
    sum_o = o.sum()
    W = [r[list(row)].sum() for row in net.adjacency]
    caps = []
    for j in range(len(r)):
        feeders = [i for i, row in enumerate(net.adjacency) if j in row]
        if not feeders:
            continue
        # Group feeders by reach so the common complete-network case reduces
        # to W * (sum_o / sum_o) without rounding drift.
        by_reach: dict[float, list[int]] = {}
        for i in feeders:
            by_reach.setdefault(W[i], []).append(i)
        if len(by_reach) == 1:
            (reach, idx), = by_reach.items()
            caps.append(reach * (sum_o / o[idx].sum()))
        else:
            caps.append(sum_o / sum(o[idx].sum() / reach for reach, idx in by_reach.items()))
    total = min([sum_o] + caps)
    out, flows, inflow = _allocate(net, total)
    return MigrationResult(net, float(total), out, inflow, flows)


def migration_feasible(net: OffsetNetwork, total: float, rtol: float = 1e-12) -> bool:
    """Whether ``total`` respects every receiver capacity and the outflow sum."""
    o = np.asarray(net.outflow, dtype=float)
    r = np.asarray(net.inflow, dtype=float)
    if total < 0 or total > o.sum() * (1 + rtol):
        return False
    _, _, inflow = _allocate(net, total)
    return bool(np.all(inflow <= r * (1 + rtol)))


def migration_oracle(net: OffsetNetwork, iterations: int = 200) -> MigrationResult:
    """Bisection on the migration total against explicit feasibility checks."""
    net.validate()
    if len(net.originators) > 6 or len(net.receivers) > 6:
        raise ValueError("oracle is meant for small networks (I, J <= 6)")
    hi = float(np.sum(net.outflow))
    if migration_feasible(net, hi, rtol=0.0):
        total = hi
    else:
        lo = 0.0
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            if mid in (lo, hi):
                break
            if migration_feasible(net, mid, rtol=0.0):
                lo = mid
            else:
                hi = mid
        total = lo
    out, flows, inflow = _allocate(net, total)
    return MigrationResult(net, total, out, inflow, flows)


@dataclass(frozen=True)
class OffsetImpact:
    network_id: str
    cost_impact: float
    treatment_delta: Mapping[str, float]
    utilization_delta: Mapping[str, float]

    def to_dict(self) -> dict:
        return {
            "network_id": self.network_id,
            "cost_impact": self.cost_impact,
            "treatment_delta": dict(self.treatment_delta),
            "utilization_delta": dict(self.utilization_delta),
        }


def offset_cost_impact(
    result: MigrationResult,
    unit_costs: Mapping[str, float],
    member_months: float,
) -> OffsetImpact:
    """Cost impact per member per period at held-constant unit costs."""
    if not member_months > 0:
        raise ValueError("member_months must be positive")
    net = result.network
    for name in net.originators + net.receivers:
        if name not in unit_costs:
            raise KeyError(f"missing baseline unit cost for treatment {name!r}")
    total = 0.0
    for i, o in enumerate(net.originators):
        for j, r in enumerate(net.receivers):
            f = result.flows[i, j]
            if f:
                total += f * (unit_costs[r] - unit_costs[o])
    delta = {}
    units = {}
    for i, o in enumerate(net.originators):
        units[o] = -float(result.outflow[i])
        delta[o] = -float(result.outflow[i]) * unit_costs[o] / member_months
    for j, r in enumerate(net.receivers):
        units[r] = float(result.inflow[j])
        delta[r] = float(result.inflow[j]) * unit_costs[r] / member_months
    return OffsetImpact(net.network_id, total / member_months, delta, units)


@dataclass(frozen=True)
class UseSignal:
    """What network building needs per candidate treatment key."""

    detection: DetectionResult
    use_change_ewa: float
    member_months: float
    unit_cost: float = float("nan")


def use_signal(detection: DetectionResult, w: float, member_months: float, unit_cost: float = float("nan")) -> UseSignal:
    if detection.change is None:
        raise ValueError("detection carries no change series")
    c = detection.change.c
    ok = np.isfinite(c)
    value = ewa(np.where(ok, c, 0.0), w, ok) if ok.any() else 0.0
    return UseSignal(detection, value, member_months, unit_cost)


def _member_matches(group: ComparabilityGroup, key: ViewpointKey, member: str) -> bool:
    leaf = key.leaf
    if leaf is None or leaf[1] != member:
        return False
    if group.dimension is not None and leaf[0] != group.dimension:
        return False
    return group.condition is None or key.get("condition") == group.condition


def build_networks(
    signals: Mapping[ViewpointKey, UseSignal],
    kb: ComparabilityKB,
    window: range = range(0),
    min_confidence: str = "M",
) -> list[OffsetNetwork]:
    """One network per KB group and condition with both a faller and a riser.

    Capacities are ``|EWA of the use change| * member_months``, i.e.
    service units per period. Adjacency is complete within the group
    except for listed exclusions.
    """
    networks = []
    for group in kb.groups:
        by_condition: dict[tuple[str, str | None], list[tuple[str, ViewpointKey, UseSignal]]] = {}
        for key in sorted(signals):
            sig = signals[key]
            for member in group.members:
                if _member_matches(group, key, member):
                    scope = (key.spec_name, key.get("condition"))
                    by_condition.setdefault(scope, []).append((member, key, sig))
        for (spec_name, condition), members in sorted(by_condition.items(), key=lambda kv: (kv[0][0], kv[0][1] or "")):
            down, up = [], []
            for member, key, sig in members:
                det = sig.detection
                if not confidence_at_least(det.confidence, min_confidence):
                    continue
                cap = abs(sig.use_change_ewa) * sig.member_months
                if not cap > 0:
                    continue
                if det.direction == "down" and sig.use_change_ewa < 0:
                    down.append((member, key, cap))
                elif det.direction == "up" and sig.use_change_ewa > 0:
                    up.append((member, key, cap))
            if not down or not up:
                continue
            adjacency = []
            for o, _, _ in down:
                adjacency.append(tuple(j for j, (r, _, _) in enumerate(up) if group.allows(o, r)))
            if any(not row for row in adjacency):
                keep = [i for i, row in enumerate(adjacency) if row]
                down = [down[i] for i in keep]
                adjacency = [adjacency[i] for i in keep]
                if not down:
                    continue
            used = sorted({j for row in adjacency for j in row})
            remap = {j: n for n, j in enumerate(used)}
            up = [up[j] for j in used]
            adjacency = [tuple(remap[j] for j in row) for row in adjacency]
            suffix = f"{spec_name}:{condition}" if condition else spec_name
            net = OffsetNetwork(
                network_id=f"{group.group_id}@{suffix}",
                originators=tuple(m for m, _, _ in down),
                outflow=tuple(c for _, _, c in down),
                receivers=tuple(m for m, _, _ in up),
                inflow=tuple(c for _, _, c in up),
                adjacency=tuple(adjacency),
                window=window,
                keys={m: k for m, k, _ in down + up},
            )
            net.validate()
            networks.append(net)
    return networks


def combine_treatment_impacts(impacts: Iterable[OffsetImpact]) -> dict[str, dict]:
    """Sum per-treatment deltas across networks, flagging multi-network treatments."""
    out: dict[str, dict] = {}
    for imp in impacts:
        for name, value in imp.treatment_delta.items():
            slot = out.setdefault(name, {"cost_delta": 0.0, "networks": []})
            slot["cost_delta"] += value
            slot["networks"].append(imp.network_id)
    for slot in out.values():
        slot["multi_network"] = len(slot["networks"]) > 1
    return out
