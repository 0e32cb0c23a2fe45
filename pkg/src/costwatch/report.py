"""Driver reports: row model, display formatting and the three renderers."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

FORMATS = ("dsv", "structured", "text_table")

FACTOR_TITLES = {
    "price": "Price: Cost per Quantity of Services",
    "use": "Use: Quantity of Services per Member",
    "intensity": "Intensity: Quantity per Claimant",
    "utilization": "Utilization: Claimants per Patient",
    "prevalence": "Prevalence: Patients per Member",
}

CONFIDENCE_KEY = "Confidence Key: N = no, M = moderate, S = strong, VS = very strong."

BASE_COLUMNS = ("key", "period", "category", "cost_share", "cost_rank", "impact", "rank", "rate", "tc")
FACTOR_FIELDS = ("impact", "rank", "rate", "tc")


@dataclass(frozen=True)
class FactorCell:
    name: str
    impact: float
    rank: int
    rate: float
    tc: str


@dataclass(frozen=True)
class ReportRow:
    """One driver. ``cost_share`` and rates are fractions, not percents."""

    key: str
    category: str
    cost_share: float
    cost_rank: int
    impact: float
    rank: int
    rate: float
    tc: str
    factors: tuple[FactorCell, ...] = ()
    period: int | None = None

    def factor(self, name: str) -> FactorCell:
        for cell in self.factors:
            if cell.name == name:
                return cell
        raise KeyError(name)


@dataclass
class DriverReport:
    category: str
    factors: tuple[str, ...] = ("price", "use")
    rows: list[ReportRow] = field(default_factory=list)
    annexes: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.factors = tuple(self.factors)
        for row in self.rows:
            if tuple(c.name for c in row.factors) != self.factors:
                raise ValueError(f"row {row.key!r} factors do not match report factors {self.factors}")

    def additivity_gap(self) -> float:
        """Largest |sum of factor impacts - total| over rows."""
        gap = 0.0
        for row in self.rows:
            if row.factors:
                gap = max(gap, abs(math.fsum(c.impact for c in row.factors) - row.impact))
        return gap

    def columns(self) -> list[str]:
        return list(BASE_COLUMNS) + [f"{f}_{part}" for f in self.factors for part in FACTOR_FIELDS]


# -- display formatting ------------------------------------------------------------

def fmt_currency(v: float) -> str:
    if v is None or not math.isfinite(v):
        return "NA"
    body = f"{abs(v):,.2f}"
    if v < 0 and body != "0.00":
        return f"-${body}"
    return f"${body}"


def fmt_rate(v: float) -> str:
    """Fraction as a percent with three significant figures."""
    if v is None or not math.isfinite(v):
        return "NA"
    pct = v * 100
    if abs(pct) >= 1000:
        body = f"{pct:,.0f}"
    elif abs(pct) < 0.01:
        body = f"{pct:.2f}"
    else:
        body = f"{pct:#.3g}".rstrip(".")
    if body.startswith("-") and body.strip("-0.") == "":
        body = body[1:]
    return f"{body}%"


def fmt_share(v: float) -> str:
    if v is None or not math.isfinite(v):
        return "NA"
    return f"{v * 100:.2f}"


def display_cells(row: ReportRow) -> list[str]:
    cells = [row.key, fmt_share(row.cost_share), str(row.cost_rank),
             fmt_currency(row.impact), str(row.rank), fmt_rate(row.rate)]
    for c in row.factors:
        cells += [fmt_currency(c.impact), str(c.rank), fmt_rate(c.rate), c.tc]
    return cells


# -- dsv ------------------------------------------------------------------------------

def _num(v: float) -> str:
    return repr(float(v))


def _row_record(row: ReportRow) -> list[str]:
    out = [row.key, "" if row.period is None else str(row.period), row.category,
           _num(row.cost_share), str(row.cost_rank), _num(row.impact), str(row.rank), _num(row.rate), row.tc]
    for c in row.factors:
        out += [_num(c.impact), str(c.rank), _num(c.rate), c.tc]
    return out


def _render_dsv(report: DriverReport, delimiter: str) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(report.columns())
    for row in report.rows:
        writer.writerow(_row_record(row))
    return buf.getvalue().encode("utf-8")


def parse_dsv(data: bytes, category: str | None = None, delimiter: str = ",") -> DriverReport:
    reader = csv.reader(io.StringIO(data.decode("utf-8")), delimiter=delimiter)
    header = next(reader)
    if tuple(header[: len(BASE_COLUMNS)]) != BASE_COLUMNS:
        raise ValueError("not a driver report: unexpected header")
    extra = header[len(BASE_COLUMNS):]
    if len(extra) % len(FACTOR_FIELDS):
        raise ValueError("malformed factor columns")
    factors = tuple(extra[i][: -len("_impact")] for i in range(0, len(extra), len(FACTOR_FIELDS)))
    rows = []
    for rec in reader:
        cells = []
        for i, name in enumerate(factors):
            base = len(BASE_COLUMNS) + i * len(FACTOR_FIELDS)
            cells.append(FactorCell(name, float(rec[base]), int(rec[base + 1]), float(rec[base + 2]), rec[base + 3]))
        rows.append(
            ReportRow(
                key=rec[0],
                period=int(rec[1]) if rec[1] else None,
                category=rec[2],
                cost_share=float(rec[3]),
                cost_rank=int(rec[4]),
                impact=float(rec[5]),
                rank=int(rec[6]),
                rate=float(rec[7]),
                tc=rec[8],
                factors=tuple(cells),
            )
        )
    if category is None:
        category = rows[0].category if rows else ""
    return DriverReport(category=category, factors=factors, rows=rows)


# -- structured -----------------------------------------------------------------------

def _clean(v: Any) -> Any:
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def _nan(v) -> float:
    return float("nan") if v is None else float(v)


def report_to_dict(report: DriverReport) -> dict:
    return _clean(
        {
            "category": report.category,
            "factors": list(report.factors),
            "rows": [
                {
                    "key": r.key,
                    "period": r.period,
                    "category": r.category,
                    "cost_share": r.cost_share,
                    "cost_rank": r.cost_rank,
                    "impact": r.impact,
                    "rank": r.rank,
                    "rate": r.rate,
                    "tc": r.tc,
                    "factors": [vars(c).copy() for c in r.factors],
                }
                for r in report.rows
            ],
            "annexes": report.annexes,
        }
    )


def report_from_dict(d: Mapping) -> DriverReport:
    rows = []
    for r in d["rows"]:
        cells = tuple(
            FactorCell(c["name"], _nan(c["impact"]), int(c["rank"]), _nan(c["rate"]), c["tc"]) for c in r["factors"]
        )
        rows.append(
            ReportRow(
                key=r["key"],
                period=r["period"],
                category=r["category"],
                cost_share=_nan(r["cost_share"]),
                cost_rank=int(r["cost_rank"]),
                impact=_nan(r["impact"]),
                rank=int(r["rank"]),
                rate=_nan(r["rate"]),
                tc=r["tc"],
                factors=cells,
            )
        )
    return DriverReport(d["category"], tuple(d["factors"]), rows, list(d.get("annexes", [])))


# -- text table -----------------------------------------------------------------------

def _text_table(report: DriverReport) -> str:
    head = ["Key", "%", "Rank", "Impact", "Rank", "Rate"]
    for _ in report.factors:
        head += ["Impact", "Rank", "Rate", "T&C"]
    body = [display_cells(r) for r in report.rows]
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]

    groups = [("", 1), ("Cost Share", 2), ("Change of Total Cost", 3)]
    groups += [(FACTOR_TITLES.get(f, f), 4) for f in report.factors]

    def span(start, stop):
        return sum(widths[start:stop]) + 3 * (stop - start - 1)

    col = 0
    for title, n in groups:
        short = len(title) - span(col, col + n)
        if short > 0:
            widths[col + n - 1] += short
        col += n

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    parts, col = [], 0
    for title, n in groups:
        width = span(col, col + n)
        parts.append(title.ljust(width))
        col += n
    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    out = [f"Category: {report.category}", rule, "| " + " | ".join(parts) + " |", line(head), rule]
    out += [line(cells) for cells in body]
    out.append(rule)
    out.append(CONFIDENCE_KEY)
    for annex in report.annexes:
        out.append(
            f"Offset {annex['network_id']}: migration {annex['total']:.6g} units, "
            f"impact {fmt_currency(annex['cost_impact'])} per member per period"
            + (" (treatment in several networks)" if annex.get("multi_network") else "")
        )
    return "\n".join(out) + "\n"


def render(report: DriverReport, fmt: str, delimiter: str = ",") -> bytes:
    if fmt == "dsv":
        return _render_dsv(report, delimiter)
    if fmt == "structured":
        return (json.dumps(report_to_dict(report), indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")
    if fmt == "text_table":
        return _text_table(report).encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def parse(data: bytes, fmt: str, delimiter: str = ",") -> DriverReport:
    if fmt == "dsv":
        return parse_dsv(data, delimiter=delimiter)
    if fmt == "structured":
        return report_from_dict(json.loads(data.decode("utf-8")))
    raise ValueError(f"format {fmt!r} is not parseable")


def parse_text_row(line: str) -> list[str]:
    """Cells of one text_table body line."""
    return [c.strip() for c in line.strip().strip("|").split("|")]


def sort_rows(rows: Sequence[ReportRow]) -> list[ReportRow]:
    """Positive drivers by rank, then negative drivers by |rank|, then zeros."""
    def order(r):
        if r.rank > 0:
            return (0, r.rank, r.key)
        if r.rank < 0:
            return (1, -r.rank, r.key)
        return (2, 0, r.key)
    return sorted(rows, key=order)
