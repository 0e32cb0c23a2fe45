"""End-to-end surveillance run: aggregate, detect, attribute, offset, report."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
import yaml

from .categorize import CATEGORIES, categorize
from .config import RunConfig
from .impact import DEFAULT_TREE, ImpactRecord, tree_names, decompose_series, rank_impacts
from .kpi import KpiSeries, Panel, aggregate, cost_share, qualify
from .offsets import (
    ComparabilityKB,
    MigrationResult,
    OffsetImpact,
    build_networks,
    combine_treatment_impacts,
    offset_cost_impact,
    solve_migration,
    use_signal,
)
from .plotting import plot_cusum, plot_trend
from .records import InputError, ViewpointKey, read_claims, read_enrollment
from .report import DriverReport, FactorCell, ReportRow, _clean, render, sort_rows
from .spc import (
    DetectionResult,
    NullModelSpec,
    ThresholdSet,
    build_change_series,
    confidence_at_least,
    learn_thresholds,
    run_cusum,
)

logger = logging.getLogger(__name__)

EXTENSIONS = {"dsv": "csv", "structured": "json", "text_table": "txt"}


class StageError(RuntimeError):
    """A pipeline stage failed; ``exit_code`` is 2 for bad input, 3 otherwise."""

    def __init__(self, stage: str, message: str, exit_code: int = 3):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = exit_code


@dataclass
class RunResult:
    reports: dict[str, DriverReport]
    impacts: dict[ViewpointKey, ImpactRecord]
    detections: dict[tuple[ViewpointKey, str], DetectionResult]
    networks: list[MigrationResult]
    offset_impacts: list[OffsetImpact]
    categories: dict[ViewpointKey, str]
    flagged: list[ViewpointKey]
    thresholds: ThresholdSet
    manifest: dict
    panel: Panel
    files: dict[str, str] = field(default_factory=dict)

    @property
    def flagged_fraction(self) -> float:
        n = self.manifest["counts"]["impact_keys"]
        return len(self.flagged) / n if n else 0.0


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        logger.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, StageError):
            return False
        code = 2 if isinstance(exc, (InputError, FileNotFoundError)) else 3
        raise StageError(self.name, str(exc), code) from exc


def resolve_thresholds(cfg: RunConfig, n_changes: int) -> tuple[ThresholdSet, str]:
    det = cfg.detection
    if det.thresholds is not None:
        return det.thresholds, "config"
    if det.thresholds_cache is not None and Path(det.thresholds_cache).exists():
        with open(det.thresholds_cache, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
        return ThresholdSet.from_dict(doc.get("thresholds", doc)), f"cache:{det.thresholds_cache}"
    null = det.null_model or NullModelSpec(series_length=n_changes)
    ts = learn_thresholds(null, k=det.drift_k, target_far=det.target_far, n_sims=det.n_sims,
                          reporting=det.reporting, seed=cfg.seed)
    return ts, "learned"


def _baseline_mask(series: KpiSeries, window: range, T: int) -> np.ndarray:
    p = series.periods
    return (p >= window.start + 1) & (p < window.start + 1 + T)


def _recent_mask(series: KpiSeries, window: range, T: int) -> np.ndarray:
    p = series.periods
    return p >= window.stop - T


def _unit_cost(series: KpiSeries, T: int) -> float:
    """Average prior-year price a(t-T) across the change window."""
    price = series.ratio("price")
    then = price.value[1 : len(price.value) - T]
    ok = price.defined[1 : len(price.value) - T]
    return float(then[ok].mean()) if ok.any() else float("nan")


def run_pipeline(
    cfg: RunConfig,
    claims: pd.DataFrame | None = None,
    enrollment: pd.DataFrame | None = None,
    write: bool = True,
) -> RunResult:
    """Run every stage; ``claims``/``enrollment`` frames override the config paths."""
    T = cfg.impact.T
    counts: dict[str, int] = {}

    with _Stage("load"):
        if claims is None or enrollment is None:
            cfg.validate()
            claims = read_claims(cfg.claims)
            enrollment = read_enrollment(cfg.enrollment)
        kb = ComparabilityKB.load(cfg.kb) if cfg.kb is not None else ComparabilityKB(())
        counts["claims"] = int(len(claims))
        counts["enrollment_rows"] = int(len(enrollment))
        if cfg.horizon is not None:
            horizon = cfg.horizon
        elif len(enrollment):
            horizon = range(int(enrollment["period"].min()), int(enrollment["period"].max()) + 1)
        else:
            raise InputError("enrollment is empty and no horizon configured")
        window = cfg.window or horizon
        if window.start < horizon.start or window.stop > horizon.stop:
            raise InputError(f"analysis window {window} outside horizon {horizon}")
        if len(window) < T + 2:
            raise InputError(f"analysis window needs at least T+2={T + 2} periods")

    with _Stage("aggregate"):
        panel = aggregate(claims, enrollment, cfg.viewpoints, horizon).window(window.start, window.stop)
        counts["rejected_records"] = int(panel.rejected)
        counts["keys"] = len(panel)

    with _Stage("qualify"):
        qualified: dict[ViewpointKey, KpiSeries] = {}
        for spec in cfg.viewpoints:
            qualified.update(qualify(panel, spec, baseline=range(window.start + 1, window.start + 1 + T)))
        counts["qualified_keys"] = len(qualified)

    n_changes = len(window) - 1 - T
    with _Stage("thresholds"):
        thresholds, threshold_source = resolve_thresholds(cfg, n_changes)

    detections: dict[tuple[ViewpointKey, str], DetectionResult] = {}
    with _Stage("detect"):
        skipped = 0
        for key in sorted(qualified):
            series = qualified[key]
            for kpi in cfg.detection.kpis:
                ratio = series.ratio(kpi)
                if not ratio.defined.any():
                    skipped += 1
                    continue
                change = build_change_series(ratio, T=T, censor_cap=cfg.detection.censor_cap, periods=series.periods)
                detections[(key, kpi)] = run_cusum(
                    change, thresholds, mode=cfg.detection.mode, reporting=cfg.detection.reporting, key=key, kpi=kpi
                )
        counts["detections"] = len(detections)
        counts["detections_skipped"] = skipped

    impacts: dict[ViewpointKey, ImpactRecord] = {}
    factor_names = tree_names(DEFAULT_TREE, "cost_per_enrollee")[1:]
    with _Stage("impact"):
        for key in sorted(qualified):
            if key.depth == 0 or (key, "cost_per_enrollee") not in detections:
                continue
            series = qualified[key]
            node = decompose_series(series, cfg.impact)
            share = cost_share(qualified, key, _recent_mask(series, window, T))
            det = {kpi: detections[(key, kpi)].label for kpi in cfg.detection.kpis if (key, kpi) in detections}
            impacts[key] = ImpactRecord(key, node.I, node.rate, share, node, detection=det)
        by_level: dict[tuple[str, int], list[ImpactRecord]] = {}
        for key, rec in impacts.items():
            by_level.setdefault((key.spec_name, key.depth), []).append(rec)
        for level in sorted(by_level):
            rank_impacts(sorted(by_level[level], key=lambda r: r.key), factor_names)
        counts["impact_keys"] = len(impacts)

    flag_tier = cfg.detection.flag_tier
    flagged = [
        k for k in sorted(impacts)
        if confidence_at_least(detections[(k, "cost_per_enrollee")].confidence, flag_tier)
    ]
    counts["flagged"] = len(flagged)

    results: list[MigrationResult] = []
    offset_impacts: list[OffsetImpact] = []
    with _Stage("offsets"):
        if kb.groups and "use" in cfg.detection.kpis:
            signals = {}
            for (key, kpi), det in detections.items():
                if kpi != "use" or key.depth == 0:
                    continue
                series = qualified[key]
                mm = float(np.mean(series.n_enrollees[T + 1 :]))
                signals[key] = use_signal(det, cfg.impact.w, mm, _unit_cost(series, T))
            networks = build_networks(signals, kb, window, min_confidence=cfg.offsets_min_confidence)
            for net in networks:
                res = solve_migration(net)
                results.append(res)
                unit_costs = {m: signals[net.keys[m]].unit_cost for m in net.originators + net.receivers}
                mm = signals[net.keys[net.originators[0]]].member_months
                offset_impacts.append(offset_cost_impact(res, unit_costs, mm))
        counts["networks"] = len(results)

    categories: dict[ViewpointKey, str] = {}
    with _Stage("categorize"):
        for key in flagged:
            series = qualified[key]
            prev = series.ratio("prevalence")
            mask = _baseline_mask(series, window, T) & prev.defined
            level = float(prev.value[mask].mean()) if mask.any() else float("nan")
            categories[key] = categorize(impacts[key], cfg.categories, prevalence=level)
        for c in CATEGORIES:
            counts[f"category_{c}"] = sum(1 for v in categories.values() if v == c)

    with _Stage("report"):
        reports = _build_reports(cfg, impacts, detections, categories, results, offset_impacts, window)

    manifest = {
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "horizon": {"start": horizon.start, "end": horizon.stop - 1},
        "window": {"start": window.start, "end": window.stop - 1},
        "thresholds": thresholds.to_dict(),
        "threshold_source": threshold_source,
        "counts": counts,
        "networks": [r.to_dict() for r in results],
        "offset_impacts": [o.to_dict() for o in offset_impacts],
        "treatment_offsets": combine_treatment_impacts(offset_impacts),
    }
    result = RunResult(reports, impacts, detections, results, offset_impacts, categories, flagged,
                       thresholds, manifest, panel)
    if write:
        with _Stage("emit"):
            result.files = emit(cfg, result, qualified)
    return result


def _build_reports(cfg, impacts, detections, categories, results, offset_impacts, window) -> dict[str, DriverReport]:
    factors = tuple(cfg.report.factors)
    rows: dict[str, list[ReportRow]] = {c: [] for c in CATEGORIES}
    period = window.stop - 1
    for key, cat in categories.items():
        rec = impacts[key]
        cells = []
        for name in factors:
            node = rec.factor(name)
            det = detections.get((key, name))
            cells.append(
                FactorCell(
                    name,
                    node.I if node is not None else float("nan"),
                    rec.factor_ranks.get(name, 0),
                    node.rate if node is not None else float("nan"),
                    det.label if det is not None else "↕N",
                )
            )
        rows[cat].append(
            ReportRow(
                key=str(key),
                category=cat,
                cost_share=rec.cost_share,
                cost_rank=rec.cost_rank,
                impact=rec.total_impact,
                rank=rec.rank,
                rate=rec.rate,
                tc=detections[(key, "cost_per_enrollee")].label,
                factors=tuple(cells),
                period=period,
            )
        )
    reports = {c: DriverReport(c, factors, sort_rows(rows[c])) for c in CATEGORIES}
    for res, imp in zip(results, offset_impacts):
        keys = {str(k) for k in res.network.keys.values()}
        annex = {
            "network_id": res.network.network_id,
            "total": res.total,
            "cost_impact": imp.cost_impact,
            "originators": list(res.network.originators),
            "receivers": list(res.network.receivers),
        }
        for c in CATEGORIES:
            if any(r.key in keys for r in reports[c].rows):
                reports[c].annexes.append(dict(annex))
    return reports


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def _write_hashed(out: Path, stem: str, ext: str, data: bytes) -> str:
    name = f"{stem}-{_digest(data)}.{ext}"
    (out / name).write_bytes(data)
    return name


def emit(cfg: RunConfig, result: RunResult, qualified: Mapping[ViewpointKey, KpiSeries]) -> dict[str, str]:
    out = Path(cfg.output_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    for cat, rep in result.reports.items():
        for fmt in cfg.report.formats:
            data = render(rep, fmt, delimiter=cfg.report.delimiter)
            files[f"{cat}.{fmt}"] = "reports/" + _write_hashed(out / "reports", cat, EXTENSIONS[fmt], data)
    if cfg.report.plots:
        (out / "figures").mkdir(exist_ok=True)
        for cat, rep in result.reports.items():
            for row in rep.rows[: cfg.report.max_plots]:
                key = ViewpointKey.parse(row.key)
                slug = hashlib.sha256(row.key.encode("utf-8")).hexdigest()[:12]
                trend = plot_trend(qualified[key], out / "figures" / f"trend-{slug}.png", T=cfg.impact.T)
                cusum = plot_cusum(result.detections[(key, "cost_per_enrollee")], result.thresholds,
                                   out / "figures" / f"cusum-{slug}.png")
                files[f"figure.trend.{row.key}"] = f"figures/{trend.name}"
                files[f"figure.cusum.{row.key}"] = f"figures/{cusum.name}"
    manifest = dict(result.manifest)
    manifest["files"] = dict(sorted(files.items()))
    data = (json.dumps(_clean(manifest), indent=2, sort_keys=True, ensure_ascii=False, default=_json_default) + "\n").encode("utf-8")
    files["manifest"] = _write_hashed(out, "manifest", "json", data)
    latest = {"manifest": files["manifest"], "files": dict(sorted((k, v) for k, v in files.items() if k != "manifest"))}
    (out / "latest.json").write_text(json.dumps(latest, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return files


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return str(v)


def write_thresholds(path: str | Path, thresholds: ThresholdSet, null_model: NullModelSpec, n_sims: int, seed: int) -> None:
    doc = {
        "thresholds": thresholds.to_dict(),
        "null_model": {**vars(null_model), "ar": list(null_model.ar), "ma": list(null_model.ma)},
        "n_sims": n_sims,
        "seed": seed,
    }
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)

