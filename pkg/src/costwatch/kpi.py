"""Aggregation of claim records into per-viewpoint KPI time series."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from .records import (
    BUILTIN_DIMENSIONS,
    CLAIM_COLUMNS,
    CLAIM_TYPES,
    UNCLASSIFIED,
    ClaimRecord,
    EnrollmentRecord,
    InputError,
    ViewpointKey,
    ViewpointSpec,
    claims_to_frame,
    dimension_registry,
    enrollment_to_frame,
    validate_specs,
)

logger = logging.getLogger(__name__)

RATIOS = ("cost_per_enrollee", "price", "use", "intensity", "utilization", "prevalence")

# Base measures carried per period, in serialization order.
MEASURES = (
    "total_cost",
    "n_episodes",
    "n_enrollees",
    "n_patients",
    "n_claimants",
    "quantity",
)
# Per-enrollee second moments used only for standard errors.
MOMENTS = ("n_records", "cost_sq", "qty_sq", "cost_qty")


@dataclass(frozen=True)
class RatioSeries:
    """Per-period ratio values with standard errors.

    ``defined`` is False where the denominator is zero; ``value`` and
    ``se`` are NaN there.
    """

    name: str
    value: np.ndarray
    se: np.ndarray
    defined: np.ndarray

    def __len__(self):
        return len(self.value)


@dataclass(frozen=True, eq=False)
class KpiSeries:
    key: ViewpointKey
    periods: np.ndarray
    total_cost: np.ndarray
    n_episodes: np.ndarray
    n_enrollees: np.ndarray
    n_patients: np.ndarray
    n_claimants: np.ndarray
    quantity: np.ndarray
    n_records: np.ndarray
    cost_sq: np.ndarray
    qty_sq: np.ndarray
    cost_qty: np.ndarray

    def __post_init__(self):
        for name in ("periods",) + MEASURES + MOMENTS:
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.periods)

    def ratio(self, name: str) -> RatioSeries:
        return derive_ratio(self, name)

    def window(self, start: int, stop: int) -> "KpiSeries":
        """Restrict to periods in ``[start, stop)`` (period ids, not indices)."""
        mask = (self.periods >= start) & (self.periods < stop)
        return replace(self, **{n: getattr(self, n)[mask] for n in ("periods",) + MEASURES + MOMENTS})


class Panel(dict):
    """Mapping ``ViewpointKey -> KpiSeries`` plus aggregation bookkeeping."""

    def __init__(self, *args, horizon: range = range(0), rejected: int = 0, **kwargs):
        super().__init__(*args, **kwargs)
        self.horizon = horizon
        self.rejected = rejected

    def for_spec(self, spec_name: str) -> dict[ViewpointKey, KpiSeries]:
        return {k: v for k, v in self.items() if k.spec_name == spec_name}

    def window(self, start: int, stop: int) -> "Panel":
        return Panel(
            {k: s.window(start, stop) for k, s in self.items()},
            horizon=range(max(start, self.horizon.start), min(stop, self.horizon.stop)),
            rejected=self.rejected,
        )


def aggregate(
    claims: Iterable[ClaimRecord] | pd.DataFrame,
    enrollment: Iterable[EnrollmentRecord] | pd.DataFrame,
    specs: Iterable[ViewpointSpec],
    horizon: range,
) -> Panel:
    """Aggregate claims into one KPI series per (viewpoint, path prefix).

    Every prefix of every spec becomes a key, including the empty root
    path. Records missing a level's attribute fall into the
    ``(unclassified)`` child so additive measures sum exactly to the parent.
    Records carrying a non-empty attribute outside the dimension registry
    are rejected and counted in ``Panel.rejected``.
    """
    specs = validate_specs(specs)
    cf = claims if isinstance(claims, pd.DataFrame) else claims_to_frame(claims)
    ef = enrollment if isinstance(enrollment, pd.DataFrame) else enrollment_to_frame(enrollment)
    periods = np.arange(horizon.start, horizon.stop)
    n = len(periods)

    population = _population(ef, horizon)
    if cf.empty:
        return Panel(horizon=horizon)

    cf = cf.copy()
    for col in CLAIM_COLUMNS:
        if col not in cf.columns:
            raise InputError(f"claims missing column {col!r}")
    out = ~cf["period"].between(horizon.start, horizon.stop - 1)
    if out.any():
        raise InputError(f"{int(out.sum())} claim(s) fall outside horizon {horizon}")
    if (cf["quantity"] < 0).any():
        raise InputError("claims with negative quantity")
    bad_type = ~cf["claim_type"].isin(CLAIM_TYPES)
    if bad_type.any():
        raise InputError(f"unknown claim_type values {sorted(cf.loc[bad_type, 'claim_type'].unique())}")

    registry = dimension_registry(specs)
    unknown = [c for c in cf.columns if c not in CLAIM_COLUMNS and c not in registry]
    rejected = 0
    if unknown:
        bad = (cf[unknown].fillna("").astype(str) != "").any(axis=1)
        rejected = int(bad.sum())
        if rejected:
            logger.warning("rejected %d record(s) with unregistered dimensions %s", rejected, unknown)
        cf = cf.loc[~bad]
    if cf.empty:
        return Panel(horizon=horizon, rejected=rejected)

    dims = list(BUILTIN_DIMENSIONS) + sorted(registry)
    work = pd.DataFrame(
        {
            "t": (cf["period"].to_numpy() - horizon.start).astype(np.int64),
            "enr": pd.factorize(cf["enrollee_id"].astype(str))[0],
            "cost": cf["cost"].to_numpy(dtype=float),
            "quantity": cf["quantity"].to_numpy(dtype=float),
        }
    )
    uniques: dict[str, np.ndarray] = {}
    for dim in dims:
        raw = cf[dim].fillna("").astype(str) if dim in cf.columns else pd.Series([""] * len(cf), index=cf.index)
        raw = raw.where(raw != "", UNCLASSIFIED)
        codes, uniq = pd.factorize(raw, sort=True)
        work[dim] = codes
        uniques[dim] = np.asarray(uniq, dtype=object)
    episode = cf["episode_id"].fillna("").astype(str).to_numpy()
    ep_codes = pd.factorize(episode)[0]
    missing_ep = episode == ""
    # Records without an episode id are episodes of their own.
    ep_codes[missing_ep] = -1 - np.arange(int(missing_ep.sum()))
    work["ep"] = ep_codes

    pat_condition = (
        work[["condition", "t", "enr"]].drop_duplicates().groupby(["condition", "t"]).size()
    )
    pat_any = work[["t", "enr"]].drop_duplicates().groupby("t").size()
    pat_any_arr = np.zeros(n)
    pat_any_arr[pat_any.index.to_numpy()] = pat_any.to_numpy()
    pat_condition_arr: dict[int, np.ndarray] = {}
    for (cond, t), count in pat_condition.items():
        pat_condition_arr.setdefault(int(cond), np.zeros(n))[int(t)] = count

    panel = Panel(horizon=horizon, rejected=rejected)

    per_enrollee_cols = ["cost", "quantity"]
    for spec in specs:
        levels = list(spec.levels)
        episodes = work[levels + ["t", "ep"]].drop_duplicates()
        for depth in range(len(levels) + 1):
            cols = levels[:depth]
            by_enr = work.groupby(cols + ["t", "enr"], sort=True)[per_enrollee_cols].sum()
            recs = work.groupby(cols + ["t"], sort=True).size()
            by_enr["cost_sq"] = by_enr["cost"] ** 2
            by_enr["qty_sq"] = by_enr["quantity"] ** 2
            by_enr["cost_qty"] = by_enr["cost"] * by_enr["quantity"]
            cell = by_enr.groupby(level=cols + ["t"], sort=True).agg(
                total_cost=("cost", "sum"),
                quantity=("quantity", "sum"),
                n_claimants=("cost", "size"),
                cost_sq=("cost_sq", "sum"),
                qty_sq=("qty_sq", "sum"),
                cost_qty=("cost_qty", "sum"),
            )
            cell["n_records"] = recs
            cell["n_episodes"] = episodes.groupby(cols + ["t"], sort=True).size()
            cell = cell.reset_index()
            grouped = cell.groupby(cols, sort=True) if cols else [((), cell)]
            for codes, block in grouped:
                codes = codes if isinstance(codes, tuple) else (codes,)
                path = tuple((dim, str(uniques[dim][c])) for dim, c in zip(cols, codes))
                key = ViewpointKey(spec.name, path)
                t_idx = block["t"].to_numpy()
                arrays = {}
                for name in ("total_cost", "quantity", "n_claimants", "cost_sq", "qty_sq", "cost_qty", "n_records", "n_episodes"):
                    arr = np.zeros(n)
                    arr[t_idx] = block[name].to_numpy(dtype=float)
                    arrays[name] = arr
                if "condition" in cols:
                    cond = codes[cols.index("condition")]
                    patients = pat_condition_arr.get(int(cond), np.zeros(n)).copy()
                else:
                    patients = pat_any_arr.copy()
                panel[key] = KpiSeries(
                    key=key,
                    periods=periods.copy(),
                    n_enrollees=population.copy(),
                    n_patients=patients,
                    **arrays,
                )
    return panel


def _population(ef: pd.DataFrame, horizon: range) -> np.ndarray:
    n = len(horizon)
    pop = np.zeros(n)
    if ef.empty:
        return pop
    if ef.duplicated(["enrollee_id", "period"]).any():
        dup = ef.loc[ef.duplicated(["enrollee_id", "period"], keep=False)].iloc[0]
        raise InputError(
            f"duplicate enrollment rows for enrollee {dup['enrollee_id']!r} period {dup['period']}"
        )
    mm = ef["member_months"].to_numpy(dtype=float)
    if ((mm <= 0) | (mm > 1)).any():
        raise InputError("member_months must lie in (0, 1]")
    t = ef["period"].to_numpy() - horizon.start
    if ((t < 0) | (t >= n)).any():
        raise InputError(f"enrollment rows fall outside horizon {horizon}")
    np.add.at(pop, t, mm)
    return pop


def _safe_div(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    defined = den > 0
    out = np.full(np.shape(num), np.nan)
    np.divide(num, den, out=out, where=defined)
    return out, defined


def _sqrt_pos(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.clip(x, 0.0, None))


def derive_ratio(series: KpiSeries, ratio: str) -> RatioSeries:
    """Ratio KPI with a per-period standard error.

    Prevalence uses the Poisson approximation ``sqrt(count) / denom`` and
    utilization the binomial ``sqrt(u (1 - u) / n_patients)``. Cost and
    quantity ratios linearize over enrollees, i.e. the per-enrollee sample
    spread of the numerator residual divided by the denominator.
    """
    s = series
    if ratio == "cost_per_enrollee":
        value, ok = _safe_div(s.total_cost, s.n_enrollees)
        var = s.cost_sq - _nan0(value) * s.total_cost
        se, _ = _safe_div(_sqrt_pos(var), s.n_enrollees)
    elif ratio == "price":
        value, ok = _safe_div(s.total_cost, s.quantity)
        a = _nan0(value)
        var = s.cost_sq - 2 * a * s.cost_qty + a**2 * s.qty_sq
        se, _ = _safe_div(_sqrt_pos(var), s.quantity)
    elif ratio == "use":
        value, ok = _safe_div(s.quantity, s.n_enrollees)
        var = s.qty_sq - _nan0(value) * s.quantity
        se, _ = _safe_div(_sqrt_pos(var), s.n_enrollees)
    elif ratio == "intensity":
        value, ok = _safe_div(s.quantity, s.n_claimants)
        var = s.qty_sq - _nan0(value) * s.quantity
        se, _ = _safe_div(_sqrt_pos(var), s.n_claimants)
    elif ratio == "utilization":
        value, ok = _safe_div(s.n_claimants, s.n_patients)
        # claimants are a binomial thinning of patients
        se, _ = _safe_div(_sqrt_pos(s.n_claimants * (1 - _nan0(value))), s.n_patients)
    elif ratio == "prevalence":
        value, ok = _safe_div(s.n_patients, s.n_enrollees)
        se, _ = _safe_div(np.sqrt(s.n_patients), s.n_enrollees)
    else:
        raise ValueError(f"unknown ratio {ratio!r}; expected one of {RATIOS}")
    se = np.where(ok, se, np.nan)
    return RatioSeries(ratio, value, se, ok)


def _nan0(x: np.ndarray) -> np.ndarray:
    return np.nan_to_num(x, nan=0.0)


def qualify(
    panel: Mapping[ViewpointKey, KpiSeries],
    spec: ViewpointSpec,
    baseline: range | None = None,
) -> dict[ViewpointKey, KpiSeries]:
    """Keep keys of ``spec`` with enough exposure and cost share.

    Exposure is claimant-months at the key; cost share is the key's cost
    over the total cost of all keys at the same depth. Both are measured
    over the ``baseline`` periods (default: the first twelve) and both
    thresholds are inclusive.
    """
    mine = {k: v for k, v in panel.items() if k.spec_name == spec.name}
    if not mine:
        return {}
    q = spec.qualification
    any_series = next(iter(mine.values()))
    if baseline is None:
        baseline = range(int(any_series.periods[0]), int(any_series.periods[0]) + 12)
    mask = (any_series.periods >= baseline.start) & (any_series.periods < baseline.stop)
    level_cost: dict[int, float] = {}
    for key, s in mine.items():
        level_cost[key.depth] = level_cost.get(key.depth, 0.0) + float(s.total_cost[mask].sum())
    kept = {}
    for key, s in mine.items():
        if key.depth == 0:
            kept[key] = s
            continue
        exposure = float(s.n_claimants[mask].sum())
        total = level_cost[key.depth]
        share = float(s.total_cost[mask].sum()) / total if total > 0 else 0.0
        if exposure >= q.min_member_months and share >= q.min_cost_share:
            kept[key] = s
    return kept


def cost_share(panel: Mapping[ViewpointKey, KpiSeries], key: ViewpointKey, mask: np.ndarray) -> float:
    level = sum(
        float(s.total_cost[mask].sum())
        for k, s in panel.items()
        if k.spec_name == key.spec_name and k.depth == key.depth
    )
    return float(panel[key].total_cost[mask].sum()) / level if level > 0 else 0.0
