"""Synthetic claims with injected change scenarios and a ground-truth manifest.

Per condition and period a Poisson number of distinct enrollees become
patients; each patient independently claims each of the condition's
treatments with that treatment's utilization probability. Claim counts,
quantities and prices then follow the configured rates. Every
(condition, period) cell draws from its own generator seeded by
``(seed, condition index, period)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd
import yaml

from .records import CLAIM_COLUMNS, InputError, write_frame

EVENT_KINDS = ("price_step", "use_ramp_down", "use_ramp_up", "prevalence_ramp", "substitution")


@dataclass(frozen=True)
class Treatment:
    id: str
    claim_type: str
    attributes: Mapping[str, str]
    utilization: float
    intensity: float
    price: float
    claims_per_claimant: float = 1.0


@dataclass(frozen=True)
class Condition:
    code: str
    prevalence: float
    treatments: tuple[Treatment, ...]
    seasonal: tuple[float, ...] = (1.0,) * 12


@dataclass(frozen=True)
class Event:
    kind: str
    period: int
    magnitude: float
    treatment: str | None = None
    condition: str | None = None
    partner: str | None = None
    group: str | None = None


@dataclass(frozen=True)
class ScenarioSpec:
    population: int
    start: int
    periods: int
    conditions: tuple[Condition, ...]
    events: tuple[Event, ...] = ()
    seed: int = 0
    price_noise: float = 0.1
    kb_groups: tuple[Mapping[str, Any], ...] = ()

    @property
    def horizon(self) -> range:
        return range(self.start, self.start + self.periods)

    def treatment(self, tid: str) -> tuple[Condition, Treatment]:
        for cond in self.conditions:
            for tr in cond.treatments:
                if tr.id == tid:
                    return cond, tr
        raise InputError(f"unknown treatment {tid!r}")

    def validate(self) -> None:
        if self.population < 1 or self.periods < 1:
            raise InputError("population and periods must be positive")
        ids = [tr.id for c in self.conditions for tr in c.treatments]
        if len(set(ids)) != len(ids):
            raise InputError("treatment ids must be unique")
        codes = [c.code for c in self.conditions]
        if len(set(codes)) != len(codes):
            raise InputError("condition codes must be unique")
        groups = {g["group_id"] for g in self.kb_groups}
        for cond in self.conditions:
            if len(cond.seasonal) != 12 or min(cond.seasonal) <= 0:
                raise InputError(f"{cond.code}: seasonal profile needs 12 positive factors")
            if not 0 < cond.prevalence <= 1:
                raise InputError(f"{cond.code}: prevalence must lie in (0, 1]")
        for ev in self.events:
            if ev.kind not in EVENT_KINDS:
                raise InputError(f"unknown event kind {ev.kind!r}")
            if ev.period not in self.horizon:
                raise InputError(f"event period {ev.period} outside horizon")
            if not np.isfinite(ev.magnitude):
                raise InputError("event magnitude must be finite")
            if ev.kind == "prevalence_ramp":
                if ev.condition not in codes:
                    raise InputError(f"prevalence_ramp on unknown condition {ev.condition!r}")
            else:
                self.treatment(ev.treatment)
            if ev.kind == "substitution":
                if ev.group is None or ev.group not in groups:
                    raise InputError("substitution events must reference a KB group")
                c_from, _ = self.treatment(ev.treatment)
                c_to, _ = self.treatment(ev.partner)
                if c_from.code != c_to.code:
                    raise InputError("substitution partners must share a condition")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScenarioSpec":
        horizon = d.get("horizon", {})
        conditions = []
        for c in d["conditions"]:
            seasonal = c.get("seasonal")
            if seasonal is None:
                seasonal = seasonal_profile(c.get("seasonal_amplitude", 0.0), c.get("seasonal_peak", 7))
            conditions.append(
                Condition(
                    code=str(c["code"]),
                    prevalence=float(c["prevalence"]),
                    seasonal=tuple(float(x) for x in seasonal),
                    treatments=tuple(
                        Treatment(
                            id=str(t["id"]),
                            claim_type=str(t["claim_type"]),
                            attributes={k: str(v) for k, v in (t.get("attributes") or {}).items()},
                            utilization=float(t["utilization"]),
                            intensity=float(t["intensity"]),
                            price=float(t["price"]),
                            claims_per_claimant=float(t.get("claims_per_claimant", 1.0)),
                        )
                        for t in c["treatments"]
                    ),
                )
            )
        events = tuple(
            Event(
                kind=str(e["kind"]),
                period=int(e["period"]),
                magnitude=float(e["magnitude"]),
                treatment=e.get("treatment"),
                condition=e.get("condition"),
                partner=e.get("partner"),
                group=e.get("group"),
            )
            for e in d.get("events", []) or []
        )
        spec = cls(
            population=int(d["population"]),
            start=int(horizon.get("start", 0)),
            periods=int(horizon.get("periods", 36)),
            conditions=tuple(conditions),
            events=events,
            seed=int(d.get("seed", 0)),
            price_noise=float(d.get("price_noise", 0.1)),
            kb_groups=tuple(d.get("kb", {}).get("groups", []) if d.get("kb") else ()),
        )
        spec.validate()
        return spec

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "population": self.population,
            "horizon": {"start": self.start, "periods": self.periods},
            "price_noise": self.price_noise,
            "conditions": [
                {
                    "code": c.code,
                    "prevalence": c.prevalence,
                    "seasonal": list(c.seasonal),
                    "treatments": [
                        {
                            "id": t.id,
                            "claim_type": t.claim_type,
                            "attributes": dict(t.attributes),
                            "utilization": t.utilization,
                            "intensity": t.intensity,
                            "price": t.price,
                            "claims_per_claimant": t.claims_per_claimant,
                        }
                        for t in c.treatments
                    ],
                }
                for c in self.conditions
            ],
            "events": [{k: v for k, v in vars(e).items() if v is not None} for e in self.events],
            "kb": {"groups": [dict(g) for g in self.kb_groups]},
        }


def seasonal_profile(amplitude: float, peak_month: int = 7) -> tuple[float, ...]:
    """Multiplicative 12-period cosine profile peaking at ``peak_month`` (0-based)."""
    m = np.arange(12)
    return tuple(float(v) for v in 1.0 + amplitude * np.cos(2 * np.pi * (m - peak_month) / 12))


@dataclass
class GeneratedData:
    claims: pd.DataFrame
    enrollment: pd.DataFrame
    manifest: dict = field(default_factory=dict)

    def write(self, out_dir: str | Path, delimiter: str = ",") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ext = "tsv" if delimiter == "\t" else "csv"
        paths = {
            "claims": out / f"claims.{ext}",
            "enrollment": out / f"enrollment.{ext}",
            "manifest": out / "manifest.yaml",
        }
        write_frame(self.claims, paths["claims"], delimiter)
        write_frame(self.enrollment, paths["enrollment"], delimiter)
        with open(paths["manifest"], "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.manifest, fh, sort_keys=True)
        if self.manifest.get("kb", {}).get("groups"):
            paths["kb"] = out / "kb.yaml"
            with open(paths["kb"], "w", encoding="utf-8") as fh:
                yaml.safe_dump(self.manifest["kb"], fh, sort_keys=False)
        return paths


def _ramp(t: int, onset: int, last: int) -> float:
    if t < onset:
        return 0.0
    return (t - onset + 1) / (last - onset + 1)


def rate_schedule(spec: ScenarioSpec) -> dict[str, np.ndarray]:
    """Per-treatment utilization, price and per-condition prevalence multipliers."""
    n = spec.periods
    periods = np.arange(spec.start, spec.start + n)
    last = spec.start + n - 1
    util = {tr.id: np.full(n, tr.utilization) for c in spec.conditions for tr in c.treatments}
    price = {tr.id: np.full(n, tr.price) for c in spec.conditions for tr in c.treatments}
    prev = {c.code: np.array([c.prevalence * c.seasonal[p % 12] for p in periods]) for c in spec.conditions}
    base_util = dict((k, v.copy()) for k, v in util.items())
    for ev in spec.events:
        ramp = np.array([_ramp(p, ev.period, last) for p in periods])
        step = (periods >= ev.period).astype(float)
        if ev.kind == "price_step":
            price[ev.treatment] = price[ev.treatment] * np.where(step > 0, ev.magnitude, 1.0)
        elif ev.kind == "use_ramp_down":
            util[ev.treatment] = util[ev.treatment] * (1 - ev.magnitude * ramp)
        elif ev.kind == "use_ramp_up":
            util[ev.treatment] = util[ev.treatment] * (1 + ev.magnitude * ramp)
        elif ev.kind == "prevalence_ramp":
            prev[ev.condition] = prev[ev.condition] * (1 + ev.magnitude * ramp)
        elif ev.kind == "substitution":
            moved = ev.magnitude * ramp * base_util[ev.treatment]
            util[ev.treatment] = util[ev.treatment] - moved
            util[ev.partner] = util[ev.partner] + moved
    for tid, u in util.items():
        if np.any(u < 0) or np.any(u > 1):
            raise InputError(f"treatment {tid}: utilization leaves [0, 1] after events")
        if np.any(price[tid] < 0):
            raise InputError(f"treatment {tid}: negative price after events")
    for code, p in prev.items():
        if np.any(p < 0) or np.any(p > 1):
            raise InputError(f"condition {code}: prevalence leaves [0, 1] after events")
    return {"util": util, "price": price, "prevalence": prev}


def _manifest(spec: ScenarioSpec) -> dict:
    events = []
    for ev in spec.events:
        if ev.kind == "price_step":
            cond, _ = spec.treatment(ev.treatment)
            events.append(_entry(ev, ev.treatment, cond.code, "price", "up" if ev.magnitude > 1 else "down"))
        elif ev.kind in ("use_ramp_down", "use_ramp_up"):
            cond, _ = spec.treatment(ev.treatment)
            direction = "down" if (ev.kind == "use_ramp_down") == (ev.magnitude > 0) else "up"
            events.append(_entry(ev, ev.treatment, cond.code, "use", direction))
        elif ev.kind == "prevalence_ramp":
            events.append(_entry(ev, None, ev.condition, "prevalence", "up" if ev.magnitude > 0 else "down"))
        else:
            cond, _ = spec.treatment(ev.treatment)
            entry = _entry(ev, ev.treatment, cond.code, "use", "down")
            entry.update(partner=ev.partner, group=ev.group)
            events.append(entry)
            partner = _entry(ev, ev.partner, cond.code, "use", "up")
            partner.update(kind="substitution_receiver", partner=ev.treatment, group=ev.group)
            events.append(partner)
    treatments = {
        tr.id: {"condition": c.code, "claim_type": tr.claim_type, "attributes": dict(tr.attributes)}
        for c in spec.conditions
        for tr in c.treatments
    }
    return {
        "seed": spec.seed,
        "population": spec.population,
        "horizon": {"start": spec.start, "periods": spec.periods},
        "events": events,
        "treatments": treatments,
        "kb": {"provenance": "synthetic scenario", "groups": [dict(g) for g in spec.kb_groups]},
    }


def _entry(ev: Event, treatment, condition, kpi, direction) -> dict:
    return {
        "kind": ev.kind,
        "treatment": treatment,
        "condition": condition,
        "onset": ev.period,
        "direction": direction,
        "kpi": kpi,
        "magnitude": ev.magnitude,
    }


def generate(spec: ScenarioSpec) -> GeneratedData:
    """Claims, enrollment and manifest for ``spec``; bit-identical per seed."""
    spec.validate()
    sched = rate_schedule(spec)
    N = spec.population
    n = spec.periods
    attr_names = sorted({a for c in spec.conditions for tr in c.treatments for a in tr.attributes})
    blocks = []
    for ci, cond in enumerate(spec.conditions):
        per_treatment: list[list[dict]] = [[] for _ in cond.treatments]
        for ti in range(n):
            period = spec.start + ti
            rng = np.random.default_rng([spec.seed, ci, ti])
            lam = N * sched["prevalence"][cond.code][ti]
            n_pat = min(int(rng.poisson(lam)), N)
            patients = np.sort(rng.choice(N, size=n_pat, replace=False))
            for ki, tr in enumerate(cond.treatments):
                u = sched["util"][tr.id][ti]
                claimants = patients[rng.random(n_pat) < u]
                if claimants.size == 0:
                    continue
                extra = max(tr.claims_per_claimant - 1.0, 0.0)
                n_claims = 1 + rng.poisson(extra, size=claimants.size)
                enr = np.repeat(claimants, n_claims)
                q_mean = tr.intensity / tr.claims_per_claimant
                qty = np.maximum(1, rng.poisson(q_mean, size=enr.size)).astype(float)
                sigma = spec.price_noise
                noise = np.exp(sigma * rng.standard_normal(enr.size) - 0.5 * sigma**2)
                cost = np.round(qty * sched["price"][tr.id][ti] * noise, 2)
                per_treatment[ki].append(
                    {
                        "enr": enr,
                        "period": np.full(enr.size, period),
                        "cost": cost,
                        "quantity": qty,
                        "episode": [f"{cond.code}-{e}-{period // 12}" for e in enr],
                    }
                )
        for ki, tr in enumerate(cond.treatments):
            for part in per_treatment[ki]:
                frame = pd.DataFrame(
                    {
                        "enrollee_id": [f"E{e:07d}" for e in part["enr"]],
                        "period": part["period"],
                        "claim_type": tr.claim_type,
                        "condition": cond.code,
                        "episode_id": part["episode"],
                        "quantity": part["quantity"],
                        "cost": part["cost"],
                    }
                )
                for a in attr_names:
                    frame[a] = tr.attributes.get(a, "")
                blocks.append(frame)
    if blocks:
        claims = pd.concat(blocks, ignore_index=True)
    else:
        claims = pd.DataFrame(columns=list(CLAIM_COLUMNS) + attr_names)
    ids = np.array([f"E{e:07d}" for e in range(N)], dtype=object)
    enrollment = pd.DataFrame(
        {
            "enrollee_id": np.tile(ids, n),
            "period": np.repeat(np.arange(spec.start, spec.start + n), N),
            "member_months": 1.0,
        }
    )
    return GeneratedData(claims=claims, enrollment=enrollment, manifest=_manifest(spec))


def expected_claimants(spec: ScenarioSpec, treatment: str) -> np.ndarray:
    """Expected distinct claimants per period of ``treatment``."""
    sched = rate_schedule(spec)
    cond, _ = spec.treatment(treatment)
    return spec.population * sched["prevalence"][cond.code] * sched["util"][treatment]


# -- preset scenarios ------------------------------------------------------------

def _rx(tid, cls, util, intensity, price, cpc=1.0):
    return {
        "id": tid,
        "claim_type": "pharmacy",
        "attributes": {"therapeutic_class": cls, "product_name": tid},
        "utilization": util,
        "intensity": intensity,
        "price": price,
        "claims_per_claimant": cpc,
    }


def _op(tid, group, place, util, intensity, price):
    return {
        "id": tid,
        "claim_type": "outpatient",
        "attributes": {"procedure_group": group, "place_of_service": place},
        "utilization": util,
        "intensity": intensity,
        "price": price,
    }


def demo_scenario(seed: int = 11, population: int = 30_000) -> ScenarioSpec:
    """Drug price hike, paired substitution and an outbreak-style prevalence ramp."""
    doc = {
        "seed": seed,
        "population": population,
        "horizon": {"start": 0, "periods": 36},
        "conditions": [
            {
                "code": "T2D",
                "prevalence": 0.08,
                "treatments": [
                    _rx("glumetza", "biguanide", 0.10, 30, 0.9),
                    _rx("metformin", "biguanide", 0.45, 30, 0.15),
                    _rx("trulicity", "glp1", 0.12, 28, 25.0),
                    _rx("januvia", "dpp4", 0.20, 30, 14.0),
                ],
            },
            {
                "code": "HTN",
                "prevalence": 0.12,
                "treatments": [
                    _rx("lisinopril", "ace_inhibitor", 0.35, 30, 0.3),
                    _rx("losartan", "arb", 0.30, 30, 0.5),
                    _rx("amlodipine", "ccb", 0.30, 30, 0.25),
                    _op("office_visit_htn", "evaluation", "office", 0.25, 1, 140.0),
                ],
            },
            {
                "code": "CANCER",
                "prevalence": 0.01,
                "treatments": [
                    _op("chemo_office", "chemo_admin", "office", 0.45, 3, 180.0),
                    _op("chemo_hospital", "chemo_admin", "hospital_on_campus", 0.40, 3, 360.0),
                ],
            },
            {
                "code": "COXSACKIE",
                "prevalence": 0.015,
                "seasonal_amplitude": 0.3,
                "seasonal_peak": 7,
                "treatments": [
                    _op("cox_office", "evaluation", "office", 0.80, 1, 120.0),
                    _op("cox_urgent", "evaluation", "urgent_care", 0.30, 1, 190.0),
                ],
            },
            {
                "code": "ASTHMA",
                "prevalence": 0.07,
                "treatments": [
                    _rx("albuterol", "saba", 0.40, 20, 2.0),
                    _rx("symbicort", "ics_laba", 0.25, 30, 11.0),
                    _rx("advair", "ics_laba", 0.25, 30, 12.0),
                ],
            },
        ],
        "events": [
            {"kind": "price_step", "treatment": "glumetza", "period": 30, "magnitude": 6.0},
            {
                "kind": "substitution",
                "treatment": "advair",
                "partner": "symbicort",
                "group": "ics_laba",
                "period": 24,
                "magnitude": 0.4,
            },
            {"kind": "prevalence_ramp", "condition": "COXSACKIE", "period": 24, "magnitude": 1.5},
        ],
        "kb": {
            "groups": [
                {"group_id": "t2d_oral", "condition": "T2D", "dimension": "product_name",
                 "members": ["glumetza", "metformin", "trulicity", "januvia"]},
                {"group_id": "ics_laba", "condition": "ASTHMA", "dimension": "product_name",
                 "members": ["symbicort", "advair", "albuterol"]},
                {"group_id": "htn_first_line", "condition": "HTN", "dimension": "product_name",
                 "members": ["lisinopril", "losartan", "amlodipine"]},
            ]
        },
    }
    return ScenarioSpec.from_dict(doc)


def null_scenario(
    seed: int = 5,
    population: int = 20_000,
    n_conditions: int = 40,
    treatments_per_condition: int = 4,
    periods: int = 25,
) -> ScenarioSpec:
    """Stationary conditions with seasonal rates and no events.

    Treatments alternate pharmacy and outpatient and carry only a
    ``product_name`` attribute, so the :func:`null_specs` hierarchy has no
    single-child chains that would duplicate a parent series.
    """
    rng = np.random.default_rng([seed, 999])
    conditions = []
    for ci in range(n_conditions):
        treatments = []
        for ki in range(treatments_per_condition):
            pharmacy = ki % 2 == 0
            treatments.append(
                {
                    "id": f"c{ci:03d}_{'rx' if pharmacy else 'op'}{ki}",
                    "claim_type": "pharmacy" if pharmacy else "outpatient",
                    "attributes": {"product_name": f"c{ci:03d}_{ki}"},
                    "utilization": float(np.round(rng.uniform(0.2, 0.45), 3)),
                    "intensity": 30.0 if pharmacy else 2.0,
                    "price": float(np.round(rng.uniform(0.5, 20) if pharmacy else rng.uniform(60, 400), 2)),
                }
            )
        conditions.append(
            {
                "code": f"C{ci:03d}",
                "prevalence": float(np.round(rng.uniform(0.015, 0.03), 4)),
                "seasonal_amplitude": float(np.round(rng.uniform(0.0, 0.3), 3)),
                "seasonal_peak": int(rng.integers(0, 12)),
                "treatments": treatments,
            }
        )
    return ScenarioSpec.from_dict(
        {
            "seed": seed,
            "population": population,
            "horizon": {"start": 0, "periods": periods},
            "conditions": conditions,
            "events": [],
        }
    )


def null_specs() -> list[dict]:
    return [{"name": "condition_product", "levels": ["condition", "claim_type", "product_name"]}]


def standard_specs() -> list[dict]:
    """Viewpoints matching the preset scenarios."""
    return [
        {"name": "condition_rx", "levels": ["condition", "claim_type", "therapeutic_class", "product_name"]},
        {"name": "drug", "levels": ["claim_type", "therapeutic_class", "product_name"]},
        {"name": "procedure", "levels": ["claim_type", "procedure_group", "place_of_service"]},
    ]
