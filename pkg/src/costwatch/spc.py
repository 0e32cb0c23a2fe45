"""Seasonal change series, CUSUM detection and simulated threshold learning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import signal

from .kpi import RatioSeries
from .records import ViewpointKey

TIERS = ("M", "S", "VS")
CONFIDENCE_ORDER = {"N": 0, "M": 1, "S": 2, "VS": 3}
DEFAULT_TARGETS = {"M": 0.10, "S": 0.05, "VS": 0.01}
DEFAULT_GRID = tuple(np.round(np.arange(0.0, 30.0 + 1e-9, 0.25), 10))
MODES = ("auto_reset", "non_restarting")
REPORTING = ("any_time", "end_of_window")

# Simulations per counter-seeded block in threshold learning.
SIM_BLOCK = 1000


def confidence_at_least(confidence: str, tier: str) -> bool:
    return CONFIDENCE_ORDER[confidence] >= CONFIDENCE_ORDER[tier]


@dataclass(frozen=True)
class ChangeSeries:
    """Seasonally differenced, normalized change rates.

    ``periods`` holds the period ids of ``t = T+1 .. P``; ``c`` is NaN
    where either side of the difference is undefined and ``x`` is 0 there
    with ``imputed`` set.
    """

    kpi: str
    T: int
    periods: np.ndarray
    c: np.ndarray
    se_c: np.ndarray
    x: np.ndarray
    imputed: np.ndarray
    censor_cap: float

    @property
    def P(self) -> int:
        return self.T + len(self.c)


def build_change_series(
    ratio: RatioSeries,
    T: int = 12,
    censor_cap: float = 8.0,
    periods: Sequence[int] | None = None,
) -> ChangeSeries:
    """Difference ``ratio`` against its value ``T`` periods earlier.

    ``x(t) = clamp(c(t) / se_c(t), +-censor_cap)`` with
    ``se_c = sqrt(SE(t)^2 + SE(t-T)^2)``. A zero ``se_c`` maps a zero change
    to 0 and a nonzero change to the cap.
    """
    if censor_cap <= 0:
        raise ValueError("censor_cap must be positive")
    n = len(ratio.value)
    P = n - 1
    if P < T + 1:
        raise ValueError(f"window too short: P={P} < T+1={T + 1}")
    if not np.any(ratio.defined):
        raise ValueError(f"ratio {ratio.name!r} is undefined in every period")
    if periods is None:
        periods = np.arange(n)
    periods = np.asarray(periods)
    now = slice(T + 1, n)
    then = slice(1, n - T)
    ok = ratio.defined[now] & ratio.defined[then]
    c = np.where(ok, ratio.value[now] - ratio.value[then], np.nan)
    se_c = np.where(ok, np.sqrt(ratio.se[now] ** 2 + ratio.se[then] ** 2), np.nan)
    x = np.zeros(len(c))
    pos = ok & (se_c > 0)
    x[pos] = c[pos] / se_c[pos]
    degenerate = ok & (se_c == 0)
    x[degenerate] = np.sign(c[degenerate]) * censor_cap
    x = np.clip(x, -censor_cap, censor_cap)
    return ChangeSeries(
        kpi=ratio.name,
        T=T,
        periods=periods[now].copy(),
        c=c,
        se_c=se_c,
        x=x,
        imputed=~ok,
        censor_cap=float(censor_cap),
    )


@dataclass(frozen=True)
class NullModelSpec:
    kind: str = "gaussian_white_noise"
    ar: tuple[float, ...] = ()
    ma: tuple[float, ...] = ()
    variance: float = 1.0
    series_length: int = 12
    burn_in: int = 200

    def __post_init__(self):
        if self.kind not in ("gaussian_white_noise", "arma"):
            raise ValueError(f"unknown null model kind {self.kind!r}")
        if not self.variance > 0:
            raise ValueError("innovation variance must be positive")
        if self.series_length < 1:
            raise ValueError("series_length must be >= 1")
        if self.kind == "arma":
            if self.ar and np.any(np.abs(np.roots(np.r_[1.0, -np.asarray(self.ar)])) >= 1):
                raise ValueError("AR coefficients are not stationary")
            if self.ma and np.any(np.abs(np.roots(np.r_[1.0, np.asarray(self.ma)])) >= 1):
                raise ValueError("MA coefficients are not invertible")

    @classmethod
    def from_dict(cls, d: Mapping) -> "NullModelSpec":
        return cls(
            kind=d.get("kind", "gaussian_white_noise"),
            ar=tuple(d.get("ar", ())),
            ma=tuple(d.get("ma", ())),
            variance=float(d.get("variance", 1.0)),
            series_length=int(d.get("series_length", 12)),
        )

    def simulate(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` independent null series, shape ``(n, series_length)``."""
        sd = np.sqrt(self.variance)
        if self.kind == "gaussian_white_noise":
            return rng.standard_normal((n, self.series_length)) * sd
        total = self.series_length + self.burn_in
        eps = rng.standard_normal((n, total)) * sd
        b = np.r_[1.0, np.asarray(self.ma, dtype=float)]
        a = np.r_[1.0, -np.asarray(self.ar, dtype=float)]
        return signal.lfilter(b, a, eps, axis=1)[:, self.burn_in :]


@dataclass(frozen=True)
class ThresholdSet:
    """Per-tier ``(h_up, h_down)`` CUSUM decision thresholds."""

    h: Mapping[str, tuple[float, float]]
    target_far: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_TARGETS))
    drift_k: float = 0.5

    def __post_init__(self):
        for tier in TIERS:
            if tier not in self.h:
                raise ValueError(f"threshold tier {tier!r} missing")
            up, down = self.h[tier]
            if not (up >= 0 and down >= 0):
                raise ValueError(f"tier {tier}: thresholds must be non-negative")
        for lo, hi in zip(TIERS, TIERS[1:]):
            for side in (0, 1):
                if not self.h[hi][side] > self.h[lo][side]:
                    raise ValueError(f"thresholds must strictly increase from {lo} to {hi}")
            if self.target_far and lo in self.target_far and hi in self.target_far:
                if not self.target_far[hi] < self.target_far[lo]:
                    raise ValueError(f"target FAR must strictly decrease from {lo} to {hi}")
        if self.drift_k < 0:
            raise ValueError("drift_k must be non-negative")

    def up(self, tier: str) -> float:
        return self.h[tier][0]

    def down(self, tier: str) -> float:
        return self.h[tier][1]

    def to_dict(self) -> dict:
        return {
            "h": {t: [float(self.h[t][0]), float(self.h[t][1])] for t in TIERS},
            "target_far": {t: float(v) for t, v in self.target_far.items()},
            "drift_k": float(self.drift_k),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ThresholdSet":
        return cls(
            h={t: (float(v[0]), float(v[1])) for t, v in d["h"].items()},
            target_far={t: float(v) for t, v in d.get("target_far", {}).items()},
            drift_k=float(d.get("drift_k", 0.5)),
        )

    @classmethod
    def symmetric(cls, m: float, s: float, vs: float, drift_k: float = 0.5, target_far=None) -> "ThresholdSet":
        return cls(
            h={"M": (m, m), "S": (s, s), "VS": (vs, vs)},
            target_far=dict(DEFAULT_TARGETS if target_far is None else target_far),
            drift_k=drift_k,
        )


@dataclass(frozen=True)
class DetectionResult:
    key: ViewpointKey | None
    kpi: str
    s_up: np.ndarray
    s_down: np.ndarray
    direction: str
    confidence: str
    flagged_at: int | None
    mode: str
    reporting: str
    crossings: tuple[tuple[int, str], ...] = ()
    change: ChangeSeries | None = None

    @property
    def label(self) -> str:
        arrow = {"up": "↑", "down": "↓"}.get(self.direction, "↕")
        return f"{arrow}{self.confidence}"

    def flagged(self, tier: str = "M") -> bool:
        return confidence_at_least(self.confidence, tier)

    def trajectory_rows(self) -> list[tuple]:
        """(period, c, x, S_up, S_down) rows for plotting exports."""
        if self.change is None:
            periods = np.arange(1, len(self.s_up) + 1)
            c = np.full(len(self.s_up), np.nan)
            x = c
        else:
            periods, c, x = self.change.periods, self.change.c, self.change.x
        return [
            (int(p), float(ci), float(xi), float(u), float(d))
            for p, ci, xi, u, d in zip(periods, c, x, self.s_up, self.s_down)
        ]


def _tier_of(value: float, thresholds: ThresholdSet, side: int) -> str:
    best = "N"
    for tier in TIERS:
        if value > thresholds.h[tier][side]:
            best = tier
    return best


def run_cusum(
    x: Sequence[float] | ChangeSeries,
    thresholds: ThresholdSet,
    mode: str = "non_restarting",
    reporting: str = "end_of_window",
    key: ViewpointKey | None = None,
    kpi: str = "",
) -> DetectionResult:
    """Two-sided tabular CUSUM on normalized change rates.

    In ``auto_reset`` mode a side restarts from 0 right after exceeding its
    VS threshold; every such crossing is recorded. ``end_of_window``
    judges direction and confidence from the terminal statistics only,
    ``any_time`` from the running maxima, with ``flagged_at`` the first
    period where either side exceeds its M threshold.
    """
    if mode not in MODES:
        raise ValueError(f"unknown CUSUM mode {mode!r}")
    if reporting not in REPORTING:
        raise ValueError(f"unknown reporting rule {reporting!r}")
    change = x if isinstance(x, ChangeSeries) else None
    xs = np.asarray(change.x if change is not None else x, dtype=float)
    if not np.all(np.isfinite(xs)):
        raise ValueError("CUSUM input must be finite")
    if change is not None and not kpi:
        kpi = change.kpi
    periods = change.periods if change is not None else np.arange(1, len(xs) + 1)

    k = thresholds.drift_k
    h_vs = (thresholds.up("VS"), thresholds.down("VS"))
    h_m = (thresholds.up("M"), thresholds.down("M"))
    up = np.zeros(len(xs))
    down = np.zeros(len(xs))
    peak = [0.0, 0.0]
    first_m = [None, None]
    crossings = []
    su = sd = 0.0
    for i, xi in enumerate(xs):
        su = max(0.0, su + xi - k)
        sd = max(0.0, sd - xi - k)
        up[i], down[i] = su, sd
        for side, val in ((0, su), (1, sd)):
            peak[side] = max(peak[side], val)
            if first_m[side] is None and val > h_m[side]:
                first_m[side] = i
        if mode == "auto_reset":
            if su > h_vs[0]:
                crossings.append((int(periods[i]), "up"))
                su = 0.0
            if sd > h_vs[1]:
                crossings.append((int(periods[i]), "down"))
                sd = 0.0

    if reporting == "end_of_window":
        stats = (up[-1], down[-1]) if len(xs) else (0.0, 0.0)
        flagged_at = int(periods[-1]) if len(xs) else None
    else:
        stats = tuple(peak)
        hits = [i for i in first_m if i is not None]
        flagged_at = int(periods[min(hits)]) if hits else None
    tiers = (_tier_of(stats[0], thresholds, 0), _tier_of(stats[1], thresholds, 1))
    sides = [name for name, tier in zip(("up", "down"), tiers) if tier != "N"]
    if not sides:
        direction, confidence, flagged_at = "none", "N", None
    else:
        direction = sides[0] if len(sides) == 1 else "mixed"
        confidence = max((t for t in tiers if t != "N"), key=CONFIDENCE_ORDER.__getitem__)
    return DetectionResult(
        key=key,
        kpi=kpi,
        s_up=up,
        s_down=down,
        direction=direction,
        confidence=confidence,
        flagged_at=flagged_at,
        mode=mode,
        reporting=reporting,
        crossings=tuple(crossings),
        change=change,
    )


def cusum_statistic(x: np.ndarray, k: float, reporting: str = "end_of_window") -> np.ndarray:
    """Vectorized non-restarting decision statistic per row of ``x``.

    The statistic is ``max(S_up, S_down)`` at the last period, or its
    maximum over the window for ``any_time``. A series is flagged at
    symmetric threshold ``h`` iff the statistic exceeds ``h``.
    """
    x = np.atleast_2d(x)
    su = np.zeros(x.shape[0])
    sd = np.zeros(x.shape[0])
    peak = np.zeros(x.shape[0])
    for j in range(x.shape[1]):
        su = np.maximum(0.0, su + x[:, j] - k)
        sd = np.maximum(0.0, sd - x[:, j] - k)
        peak = np.maximum(peak, np.maximum(su, sd))
    if reporting == "any_time":
        return peak
    return np.maximum(su, sd)


def simulate_statistics(null_model: NullModelSpec, k: float, n_sims: int, seed: int, reporting: str) -> np.ndarray:
    """Decision statistics of ``n_sims`` null series.

    Blocks of ``SIM_BLOCK`` simulations draw from generators seeded by
    ``(seed, block index)``, so any partitioning of the work reproduces the
    same values.
    """
    out = []
    for block, start in enumerate(range(0, n_sims, SIM_BLOCK)):
        size = min(SIM_BLOCK, n_sims - start)
        rng = np.random.default_rng([seed, block])
        out.append(cusum_statistic(null_model.simulate(rng, size), k, reporting))
    return np.concatenate(out) if out else np.zeros(0)


def false_alarm_curve(stats: np.ndarray, grid: Sequence[float]) -> np.ndarray:
    stats = np.sort(stats)
    grid = np.asarray(grid, dtype=float)
    # count of stats strictly greater than each h
    above = len(stats) - np.searchsorted(stats, grid, side="right")
    return above / len(stats)


def learn_thresholds(
    null_model: NullModelSpec,
    k: float = 0.5,
    target_far: Mapping[str, float] | None = None,
    n_sims: int = 10_000,
    grid: Sequence[float] = DEFAULT_GRID,
    reporting: str = "end_of_window",
    seed: int = 0,
) -> ThresholdSet:
    """Pick per-tier thresholds whose simulated false-alarm rate is nearest target.

    Thresholds are shared by both directions; a null series counts as a
    false alarm when either side exceeds ``h``. Statistics are those of
    the non-restarting chart, which also covers ``auto_reset`` under
    ``any_time`` reporting since a reset only follows a crossing.
    """
    targets = dict(DEFAULT_TARGETS if target_far is None else target_far)
    if n_sims < 1000:
        raise ValueError("n_sims must be at least 1000")
    grid = np.asarray(grid, dtype=float)
    if len(grid) == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be non-empty and strictly ascending")
    if reporting not in REPORTING:
        raise ValueError(f"unknown reporting rule {reporting!r}")
    stats = simulate_statistics(null_model, k, n_sims, seed, reporting)
    far = false_alarm_curve(stats, grid)

    chosen: dict[str, int] = {}
    for tier in TIERS:
        target = targets[tier]
        if far[-1] > target:
            raise ValueError(
                f"grid cannot reach target FAR {target} for tier {tier}: "
                f"rate at h={grid[-1]} is {far[-1]:.4f}"
            )
        chosen[tier] = int(np.argmin(np.abs(far - target)))
    prev = -1
    h = {}
    for tier in TIERS:
        idx = max(chosen[tier], prev + 1)
        if idx >= len(grid):
            raise ValueError(f"grid too short to keep tier {tier} above the tier below it")
        h[tier] = (float(grid[idx]), float(grid[idx]))
        prev = idx
    return ThresholdSet(h=h, target_far=targets, drift_k=k)


def empirical_far(
    thresholds: ThresholdSet,
    null_model: NullModelSpec,
    n_sims: int,
    seed: int,
    mode: str = "non_restarting",
    reporting: str = "end_of_window",
) -> dict[str, float]:
    """Per-tier false-alarm rate by running :func:`run_cusum` series by series."""
    rng = np.random.default_rng(seed)
    series = null_model.simulate(rng, n_sims)
    counts = dict.fromkeys(TIERS, 0)
    for row in series:
        res = run_cusum(row, thresholds, mode=mode, reporting=reporting)
        for tier in TIERS:
            if res.flagged(tier):
                counts[tier] += 1
    return {t: counts[t] / n_sims for t in TIERS}
