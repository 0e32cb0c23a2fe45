"""Record model, viewpoint specifications and delimited-file I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import pandas as pd
import yaml

CLAIM_TYPES = ("pharmacy", "inpatient", "outpatient")

# Dimensions carried as first-class record fields rather than attributes.
BUILTIN_DIMENSIONS = ("condition", "claim_type")

CLAIM_COLUMNS = (
    "enrollee_id",
    "period",
    "claim_type",
    "condition",
    "episode_id",
    "quantity",
    "cost",
)
ENROLLMENT_COLUMNS = ("enrollee_id", "period", "member_months")

UNCLASSIFIED = "(unclassified)"


class InputError(ValueError):
    """Raised for malformed input records, files or configuration."""


@dataclass(frozen=True)
class ClaimRecord:
    enrollee_id: str
    period: int
    claim_type: str
    quantity: float
    cost: float
    condition: str | None = None
    episode_id: str | None = None
    attributes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.claim_type not in CLAIM_TYPES:
            raise InputError(f"unknown claim_type {self.claim_type!r}")
        if not self.quantity >= 0:
            raise InputError(f"negative quantity {self.quantity!r} for {self.enrollee_id}")


@dataclass(frozen=True)
class EnrollmentRecord:
    enrollee_id: str
    period: int
    member_months: float = 1.0

    def __post_init__(self):
        if not 0 < self.member_months <= 1:
            raise InputError(f"member_months must lie in (0, 1], got {self.member_months!r}")


@dataclass(frozen=True)
class Qualification:
    min_member_months: float = 0.0
    min_cost_share: float = 0.0


@dataclass(frozen=True)
class ViewpointSpec:
    """A drill path: ordered claim dimensions monitored as a hierarchy."""

    name: str
    levels: tuple[str, ...]
    qualification: Qualification = Qualification()

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise InputError(f"viewpoint {self.name!r} has no levels")
        if len(set(self.levels)) != len(self.levels):
            raise InputError(f"viewpoint {self.name!r} repeats a level")
        q = self.qualification
        for value in (q.min_member_months, q.min_cost_share):
            if not pd.notna(value) or value in (float("inf"), float("-inf")):
                raise InputError(f"viewpoint {self.name!r} has a non-finite threshold")
        if not 0 <= q.min_cost_share <= 1:
            raise InputError(f"viewpoint {self.name!r}: min_cost_share outside [0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ViewpointSpec":
        q = d.get("qualification") or {}
        return cls(
            name=str(d["name"]),
            levels=tuple(d["levels"]),
            qualification=Qualification(
                min_member_months=float(q.get("min_member_months", 0.0)),
                min_cost_share=float(q.get("min_cost_share", 0.0)),
            ),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "levels": list(self.levels),
            "qualification": {
                "min_member_months": self.qualification.min_member_months,
                "min_cost_share": self.qualification.min_cost_share,
            },
        }


@dataclass(frozen=True, order=True)
class ViewpointKey:
    """A concrete node of a viewpoint hierarchy.

    ``path`` is a tuple of ``(dimension, code)`` pairs forming a prefix of
    the spec's levels. The empty path is the spec's root (whole population).
    """

    spec_name: str
    path: tuple[tuple[str, str], ...] = ()

    @property
    def depth(self) -> int:
        return len(self.path)

    @property
    def label(self) -> str:
        return "/".join(f"{d}={c}" for d, c in self.path) or "(all)"

    def get(self, dimension: str) -> str | None:
        for d, c in self.path:
            if d == dimension:
                return c
        return None

    @property
    def leaf(self) -> tuple[str, str] | None:
        return self.path[-1] if self.path else None

    def parent(self) -> "ViewpointKey":
        if not self.path:
            raise ValueError("root key has no parent")
        return ViewpointKey(self.spec_name, self.path[:-1])

    def __str__(self) -> str:
        return f"{self.spec_name}:{self.label}"

    @classmethod
    def parse(cls, text: str) -> "ViewpointKey":
        """Inverse of ``str(key)``."""
        spec_name, _, label = text.partition(":")
        if not label or label == "(all)":
            return cls(spec_name, ())
        pairs = []
        for part in label.split("/"):
            dim, sep, code = part.partition("=")
            if not sep:
                raise InputError(f"malformed key component {part!r}")
            pairs.append((dim, code))
        return cls(spec_name, tuple(pairs))


def dimension_registry(specs: Iterable[ViewpointSpec]) -> set[str]:
    """Union of attribute dimensions referenced by ``specs``."""
    names: set[str] = set()
    for spec in specs:
        names.update(level for level in spec.levels if level not in BUILTIN_DIMENSIONS)
    return names


def validate_specs(specs: Iterable[ViewpointSpec]) -> list[ViewpointSpec]:
    specs = list(specs)
    seen = set()
    for spec in specs:
        if spec.name in seen:
            raise InputError(f"duplicate viewpoint name {spec.name!r}")
        seen.add(spec.name)
    return specs


def load_specs(path: str | Path) -> list[ViewpointSpec]:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    items = doc.get("viewpoints", doc) if isinstance(doc, dict) else doc
    return validate_specs(ViewpointSpec.from_dict(d) for d in items)


# -- frames ------------------------------------------------------------------


def claims_to_frame(claims: Iterable[ClaimRecord]) -> pd.DataFrame:
    rows = []
    for rec in claims:
        row = {
            "enrollee_id": rec.enrollee_id,
            "period": rec.period,
            "claim_type": rec.claim_type,
            "condition": rec.condition or "",
            "episode_id": rec.episode_id or "",
            "quantity": float(rec.quantity),
            "cost": float(rec.cost),
        }
        for name, code in rec.attributes.items():
            row[name] = code if code is not None else ""
        rows.append(row)
    frame = pd.DataFrame(rows, columns=None if rows else list(CLAIM_COLUMNS))
    attr_cols = [c for c in frame.columns if c not in CLAIM_COLUMNS]
    frame[attr_cols] = frame[attr_cols].fillna("")
    return frame


def enrollment_to_frame(enrollment: Iterable[EnrollmentRecord]) -> pd.DataFrame:
    rows = [(e.enrollee_id, e.period, float(e.member_months)) for e in enrollment]
    return pd.DataFrame(rows, columns=list(ENROLLMENT_COLUMNS))


def read_claims(path: str | Path, delimiter: str | None = None) -> pd.DataFrame:
    """Read a claims file; empty strings mean "absent"."""
    path = Path(path)
    sep = delimiter or _guess_delimiter(path)
    frame = pd.read_csv(path, sep=sep, dtype=str, keep_default_na=False)
    missing = [c for c in CLAIM_COLUMNS if c not in frame.columns]
    if missing:
        raise InputError(f"{path}: missing claim columns {missing}")
    try:
        frame["period"] = frame["period"].astype(int)
        frame["quantity"] = frame["quantity"].astype(float)
        frame["cost"] = frame["cost"].astype(float)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return frame


def read_enrollment(path: str | Path, delimiter: str | None = None) -> pd.DataFrame:
    path = Path(path)
    sep = delimiter or _guess_delimiter(path)
    frame = pd.read_csv(path, sep=sep, dtype=str, keep_default_na=False)
    missing = [c for c in ENROLLMENT_COLUMNS if c not in frame.columns]
    if missing:
        raise InputError(f"{path}: missing enrollment columns {missing}")
    try:
        frame["period"] = frame["period"].astype(int)
        frame["member_months"] = frame["member_months"].astype(float)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return frame[list(ENROLLMENT_COLUMNS)]


def write_frame(frame: pd.DataFrame, path: str | Path, delimiter: str = ",") -> None:
    frame.to_csv(path, sep=delimiter, index=False, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)


def _guess_delimiter(path: Path) -> str:
    return "\t" if path.suffix.lower() in (".tsv", ".tab") else ","
