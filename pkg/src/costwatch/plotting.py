"""PNG figures for flagged drivers: KPI trend and CUSUM trajectory.

Figures are built on the object API with the Agg canvas so no global
pyplot state is touched, and PNG metadata is stripped so files are
byte-stable across runs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .kpi import KpiSeries
from .spc import TIERS, DetectionResult, ThresholdSet

STYLE = {"font.size": 9}
TIER_COLORS = {"M": "#e6a23c", "S": "#d9534f", "VS": "#8e44ad"}


def _save(fig: Figure, path: Path) -> Path:
    FigureCanvasAgg(fig)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    return path


def plot_trend(series: KpiSeries, path: str | Path, kpi: str = "cost_per_enrollee", T: int = 12) -> Path:
    """KPI level with its value one seasonal lag earlier."""
    fig = Figure(figsize=(6, 3))
    ax = fig.add_subplot(1, 1, 1)
    ratio = series.ratio(kpi)
    periods = np.asarray(series.periods)
    ax.plot(periods, ratio.value, marker="o", ms=3, lw=1.2, color="#1f77b4", label=kpi)
    if len(periods) > T:
        ax.plot(periods[T:], ratio.value[:-T], lw=1, ls="--", color="0.5", label=f"{kpi} (t-{T})")
    ax.set_xlabel("period")
    ax.set_ylabel(kpi)
    ax.set_title(str(series.key), fontsize=8)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_cusum(det: DetectionResult, thresholds: ThresholdSet, path: str | Path) -> Path:
    """Up and down CUSUM statistics against the tier thresholds."""
    fig = Figure(figsize=(6, 3))
    ax = fig.add_subplot(1, 1, 1)
    periods = det.change.periods if det.change is not None else np.arange(len(det.s_up))
    ax.step(periods, det.s_up, where="mid", color="#2ca02c", label="S+")
    ax.step(periods, -np.asarray(det.s_down), where="mid", color="#d62728", label="-S-")
    for tier in TIERS:
        ax.axhline(thresholds.up(tier), color=TIER_COLORS[tier], lw=0.8, ls=":")
        ax.axhline(-thresholds.down(tier), color=TIER_COLORS[tier], lw=0.8, ls=":")
    ax.axhline(0, color="0.3", lw=0.6)
    ax.set_xlabel("period")
    ax.set_ylabel("CUSUM")
    ax.set_title(f"{det.key} {det.kpi} {det.label}", fontsize=8)
    ax.legend(fontsize=7, frameon=False, loc="upper left")
    fig.tight_layout()
    return _save(fig, Path(path))
