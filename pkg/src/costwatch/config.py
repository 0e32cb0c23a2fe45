"""Run configuration loaded from YAML."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .categorize import CategoryRules
from .impact import ImpactConfig
from .kpi import RATIOS
from .records import InputError, ViewpointSpec, load_specs, validate_specs
from .report import FORMATS
from .spc import DEFAULT_TARGETS, MODES, REPORTING, TIERS, NullModelSpec, ThresholdSet


@dataclass
class DetectionConfig:
    kpis: tuple[str, ...] = RATIOS
    mode: str = "non_restarting"
    reporting: str = "end_of_window"
    censor_cap: float = 8.0
    drift_k: float = 0.5
    flag_tier: str = "S"
    thresholds: ThresholdSet | None = None
    thresholds_cache: Path | None = None
    null_model: NullModelSpec | None = None
    target_far: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TARGETS))
    n_sims: int = 10_000

    def __post_init__(self):
        unknown = set(self.kpis) - set(RATIOS)
        if unknown:
            raise InputError(f"unknown detection KPIs {sorted(unknown)}")
        if "cost_per_enrollee" not in self.kpis:
            raise InputError("detection must include cost_per_enrollee")
        if self.mode not in MODES:
            raise InputError(f"unknown CUSUM mode {self.mode!r}")
        if self.reporting not in REPORTING:
            raise InputError(f"unknown reporting rule {self.reporting!r}")
        if self.flag_tier not in TIERS:
            raise InputError(f"unknown flag tier {self.flag_tier!r}")


@dataclass
class ReportConfig:
    factors: tuple[str, ...] = ("price", "use")
    formats: tuple[str, ...] = FORMATS
    delimiter: str = ","
    plots: bool = True
    max_plots: int = 5

    def __post_init__(self):
        bad = set(self.formats) - set(FORMATS)
        if bad:
            raise InputError(f"unknown report formats {sorted(bad)}")


@dataclass
class RunConfig:
    claims: Path
    enrollment: Path
    viewpoints: list[ViewpointSpec]
    output_dir: Path
    kb: Path | None = None
    horizon: range | None = None
    window: range | None = None
    impact: ImpactConfig = field(default_factory=ImpactConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    offsets_min_confidence: str = "S"
    categories: CategoryRules = field(default_factory=CategoryRules)
    report: ReportConfig = field(default_factory=ReportConfig)
    seed: int = 0

    def validate(self) -> None:
        for label, path in (("claims", self.claims), ("enrollment", self.enrollment), ("kb", self.kb)):
            if path is not None and not Path(path).exists():
                raise InputError(f"{label} file not found: {path}")
        validate_specs(self.viewpoints)
        if self.offsets_min_confidence not in TIERS:
            raise InputError(f"unknown offsets min_confidence {self.offsets_min_confidence!r}")
        unknown = set(self.report.factors) - set(RATIOS)
        if unknown:
            raise InputError(f"unknown report factors {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: str | Path = ".") -> "RunConfig":
        base = Path(base_dir)

        def path(value):
            if value is None:
                return None
            p = Path(value)
            return p if p.is_absolute() else base / p

        inputs = d.get("inputs", {})
        if "claims" not in inputs or "enrollment" not in inputs:
            raise InputError("config needs inputs.claims and inputs.enrollment")
        vp = d.get("viewpoints")
        if isinstance(vp, str):
            specs = load_specs(path(vp))
        elif vp:
            specs = validate_specs(ViewpointSpec.from_dict(v) for v in vp)
        else:
            raise InputError("config needs viewpoints")

        det = dict(d.get("detection", {}) or {})
        thresholds = det.pop("thresholds", None)
        if thresholds is not None:
            if "h" in thresholds:
                thresholds = ThresholdSet.from_dict(thresholds)
            else:
                thresholds = ThresholdSet.symmetric(
                    thresholds["M"], thresholds["S"], thresholds["VS"], drift_k=float(det.get("drift_k", 0.5))
                )
        null_model = det.pop("null_model", None)
        detection = DetectionConfig(
            kpis=tuple(det.pop("kpis", RATIOS)),
            thresholds=thresholds,
            thresholds_cache=path(det.pop("thresholds_cache", None)),
            null_model=NullModelSpec.from_dict(null_model) if null_model else None,
            target_far={k: float(v) for k, v in det.pop("target_far", DEFAULT_TARGETS).items()},
            **det,
        )
        rep = dict(d.get("report", {}) or {})
        for name in ("factors", "formats"):
            if name in rep:
                rep[name] = tuple(rep[name])
        return cls(
            claims=path(inputs["claims"]),
            enrollment=path(inputs["enrollment"]),
            kb=path(inputs.get("kb")),
            viewpoints=specs,
            output_dir=path(d.get("output_dir", "out")),
            horizon=_range(d.get("horizon")),
            window=_range(d.get("window")),
            impact=ImpactConfig(**(d.get("impact") or {})),
            detection=detection,
            offsets_min_confidence=str((d.get("offsets") or {}).get("min_confidence", "S")),
            categories=CategoryRules.from_dict(d.get("categories")),
            report=ReportConfig(**rep),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise InputError(f"config not found: {path}")
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self) -> dict:
        det = self.detection
        return {
            "inputs": {
                "claims": str(self.claims),
                "enrollment": str(self.enrollment),
                "kb": None if self.kb is None else str(self.kb),
            },
            "viewpoints": [v.to_dict() for v in self.viewpoints],
            "output_dir": str(self.output_dir),
            "horizon": _range_dict(self.horizon),
            "window": _range_dict(self.window),
            "impact": {"w": self.impact.w, "T": self.impact.T},
            "detection": {
                "kpis": list(det.kpis),
                "mode": det.mode,
                "reporting": det.reporting,
                "censor_cap": det.censor_cap,
                "drift_k": det.drift_k,
                "flag_tier": det.flag_tier,
                "thresholds": None if det.thresholds is None else det.thresholds.to_dict(),
                "thresholds_cache": None if det.thresholds_cache is None else str(det.thresholds_cache),
                "null_model": None if det.null_model is None else vars(det.null_model),
                "target_far": det.target_far,
                "n_sims": det.n_sims,
            },
            "offsets": {"min_confidence": self.offsets_min_confidence},
            "categories": self.categories.to_dict(),
            "report": {
                "factors": list(self.report.factors),
                "formats": list(self.report.formats),
                "delimiter": self.report.delimiter,
                "plots": self.report.plots,
                "max_plots": self.report.max_plots,
            },
            "seed": self.seed,
        }

    def digest(self) -> str:
        """Hash of the settings and input contents; paths and output_dir do not count."""
        doc = self.to_dict()
        doc.pop("output_dir")
        doc["inputs"] = {k: _file_sha(v) for k, v in doc["inputs"].items()}
        blob = json.dumps(doc, sort_keys=True, default=_jsonable).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _file_sha(path: str | None) -> str | None:
    if path is None or not Path(path).is_file():
        return path
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return str(v)


def _range(d) -> range | None:
    """``{start, end}`` with ``end`` inclusive, or ``{start, periods}``."""
    if d is None:
        return None
    start = int(d["start"])
    if "end" in d:
        stop = int(d["end"]) + 1
    elif "periods" in d:
        stop = start + int(d["periods"])
    else:
        raise InputError("range needs 'end' or 'periods'")
    if stop <= start:
        raise InputError(f"empty range {d}")
    return range(start, stop)


def _range_dict(r: range | None) -> dict | None:
    return None if r is None else {"start": r.start, "end": r.stop - 1}
