"""EWA cost impact and proportional-remainder factor decomposition."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .kpi import KpiSeries
from .records import ViewpointKey

DEFAULT_TREE: dict[str, tuple[str, ...]] = {
    "cost_per_enrollee": ("price", "use"),
    "use": ("intensity", "utilization", "prevalence"),
}

PRODUCT_RTOL = 1e-9


@dataclass(frozen=True)
class ImpactConfig:
    w: float = 0.9
    T: int = 12

    def __post_init__(self):
        if not 0 < self.w <= 1:
            raise ValueError(f"EWA weight must lie in (0, 1], got {self.w}")
        if self.T < 1:
            raise ValueError("seasonal lag T must be >= 1")


@dataclass
class DecompositionNode:
    factor_name: str
    I: float
    J: float
    rate: float
    remainder_delta: float | None = None
    children: list["DecompositionNode"] = field(default_factory=list)

    def find(self, name: str) -> "DecompositionNode | None":
        if self.factor_name == name:
            return self
        for child in self.children:
            hit = child.find(name)
            if hit is not None:
                return hit
        return None

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()

    def leaves(self) -> list["DecompositionNode"]:
        return [n for n in self.walk() if not n.children]

    def to_dict(self) -> dict:
        return {
            "factor": self.factor_name,
            "I": self.I,
            "J": self.J,
            "rate": None if np.isnan(self.rate) else self.rate,
            "delta": self.remainder_delta,
            "children": [c.to_dict() for c in self.children],
        }


@dataclass
class ImpactRecord:
    key: ViewpointKey
    total_impact: float
    rate: float
    cost_share: float
    decomposition: DecompositionNode
    rank: int = 0
    cost_rank: int = 0
    factor_ranks: dict[str, int] = field(default_factory=dict)
    detection: dict = field(default_factory=dict)

    def factor(self, name: str) -> DecompositionNode | None:
        return self.decomposition.find(name)


def ewa(values: Sequence[float], w: float, mask: Sequence[bool] | None = None) -> float:
    """Exponentially weighted average; the last value gets weight ``w**0``.

    Weights ``w**(P-t)`` are normalized to sum to one, which is the
    closed form ``(1-w)/(1-w**n)`` for ``w < 1`` and the plain mean at
    ``w = 1``. Masked-out terms are dropped and the rest renormalized.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("ewa of an empty vector")
    if not 0 < w <= 1:
        raise ValueError(f"EWA weight must lie in (0, 1], got {w}")
    weights = np.ones(v.size) if w == 1 else w ** np.arange(v.size - 1, -1, -1, dtype=float)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("ewa with every term masked out")
        v, weights = v[mask], weights[mask]
    if w == 1:
        return float(np.mean(v))
    return float(np.dot(weights, v) / weights.sum())


def _now_then(arr: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(arr)
    if n - 1 < T + 1:
        raise ValueError(f"window too short: P={n - 1} < T+1={T + 1}")
    return arr[T + 1 :], arr[1 : n - T]


def _support(arrays: Sequence[np.ndarray], T: int) -> np.ndarray:
    ok = None
    for arr in arrays:
        now, then = _now_then(np.asarray(arr, dtype=float), T)
        part = np.isfinite(now) & np.isfinite(then)
        ok = part if ok is None else ok & part
    return ok


def _ewa_or_zero(values: np.ndarray, w: float, support: np.ndarray) -> float:
    if not support.any():
        return 0.0
    return ewa(np.where(support, values, 0.0), w, support)


def _rate(now: np.ndarray, then: np.ndarray, w: float, support: np.ndarray) -> float:
    if not support.any():
        return float("nan")
    base = ewa(np.where(support, then, 0.0), w, support)
    if base == 0:
        return float("nan")
    return ewa(np.where(support, now - then, 0.0), w, support) / base


def total_impact(s: Sequence[float], cfg: ImpactConfig, support: np.ndarray | None = None) -> tuple[float, float]:
    """``(I, rate)`` for a cost-per-enrollee series ``s(0..P)``.

    NaN entries of ``s`` mark undefined periods and drop out of both
    averages; ``rate`` is NaN when the baseline average is zero.
    """
    s = np.asarray(s, dtype=float)
    now, then = _now_then(s, cfg.T)
    if support is None:
        support = _support([s], cfg.T)
    I = _ewa_or_zero(now - then, cfg.w, support)
    return I, _rate(now, then, cfg.w, support)


def _check_product(target: np.ndarray, factors: Sequence[np.ndarray]) -> None:
    prod = np.prod(np.vstack(factors), axis=0)
    ok = np.isfinite(target) & np.isfinite(prod)
    err = np.abs(prod[ok] - target[ok])
    tol = PRODUCT_RTOL * np.maximum(np.abs(target[ok]), 1e-300)
    if np.any(err > tol):
        raise ValueError("factor product does not match the target ratio")


def _adjust(J: list[float], parent: float) -> tuple[list[float], float]:
    delta = sum(J) - parent
    denom = sum(abs(j) for j in J)
    if denom == 0:
        return [j - delta / len(J) for j in J], delta
    return [j - delta * abs(j) / denom for j in J], delta


def decompose_two_factor(
    price: Sequence[float],
    use: Sequence[float],
    cfg: ImpactConfig,
    s: Sequence[float] | None = None,
    names: tuple[str, str] = ("price", "use"),
) -> tuple[DecompositionNode, DecompositionNode]:
    """Split the cost-per-enrollee impact into price and use contributions.

    Each preliminary contribution lets one factor move while the other
    stays at its value one lag earlier; the remainder ``delta`` is shared
    out in proportion to ``|J|`` so the two adjusted impacts add up to
    ``I(c)`` exactly.
    """
    a = np.asarray(price, dtype=float)
    e = np.asarray(use, dtype=float)
    s = a * e if s is None else np.asarray(s, dtype=float)
    _check_product(s, [a, e])
    support = _support([s, a, e], cfg.T)
    a_now, a_then = _now_then(a, cfg.T)
    e_now, e_then = _now_then(e, cfg.T)
    s_now, s_then = _now_then(s, cfg.T)
    I = _ewa_or_zero(s_now - s_then, cfg.w, support)
    c1 = e_then * (a_now - a_then)
    c2 = (e_now - e_then) * a_then
    J1 = _ewa_or_zero(c1, cfg.w, support)
    J2 = _ewa_or_zero(c2, cfg.w, support)
    delta = (J1 + J2) - I
    denom = abs(J1) + abs(J2)
    if denom == 0:
        I1, I2 = J1 - delta / 2, J2 - delta / 2
    else:
        I1 = J1 - delta * abs(J1) / denom
        I2 = J2 - delta * abs(J2) / denom
    return (
        DecompositionNode(names[0], I1, J1, _rate(a_now, a_then, cfg.w, support), delta),
        DecompositionNode(names[1], I2, J2, _rate(e_now, e_then, cfg.w, support), delta),
    )


def decompose_multi_factor(
    factors: Mapping[str, Sequence[float]],
    cfg: ImpactConfig,
    parent_impact: float | None = None,
    scale: Sequence[float] | None = None,
    target: Sequence[float] | None = None,
) -> list[DecompositionNode]:
    """Generalized split over ``m >= 2`` multiplicative factors.

    ``c_i(t) = scale(t-T) * [f_i(t) - f_i(t-T)] * prod_{j != i} f_j(t-T)``.
    ``scale`` carries factors held at past values by an enclosing split
    (for the use node, the price). ``parent_impact`` defaults to the EWA
    of the scaled product change on this node's support.
    """
    names = list(factors)
    if len(names) < 2:
        raise ValueError("need at least two factors")
    fs = [np.asarray(factors[n], dtype=float) for n in names]
    if target is not None:
        _check_product(np.asarray(target, dtype=float), fs)
    arrays = list(fs) + ([np.asarray(scale, dtype=float)] if scale is not None else [])
    support = _support(arrays, cfg.T)
    nows, thens = zip(*(_now_then(f, cfg.T) for f in fs))
    if scale is not None:
        _, scale_then = _now_then(np.asarray(scale, dtype=float), cfg.T)
    if parent_impact is None:
        prod_now = np.prod(np.vstack(nows), axis=0)
        prod_then = np.prod(np.vstack(thens), axis=0)
        change = prod_now - prod_then
        if scale is not None:
            change = scale_then * change
        parent_impact = _ewa_or_zero(change, cfg.w, support)
    J = []
    for i in range(len(fs)):
        held = 1.0
        for j in range(len(fs)):
            if j != i:
                held = held * thens[j]
        c = (nows[i] - thens[i]) * held
        if scale is not None:
            c = scale_then * c
        J.append(_ewa_or_zero(c, cfg.w, support))
    adjusted, delta = _adjust(J, parent_impact)
    return [
        DecompositionNode(n, Ii, Ji, _rate(nows[i], thens[i], cfg.w, support), delta)
        for i, (n, Ii, Ji) in enumerate(zip(names, adjusted, J))
    ]


def decompose_series(
    series: KpiSeries,
    cfg: ImpactConfig,
    tree: Mapping[str, Sequence[str]] = DEFAULT_TREE,
    root: str = "cost_per_enrollee",
) -> DecompositionNode:
    """Full attribution tree for one KPI series."""
    values = {name: series.ratio(name).value for name in tree_names(tree, root)}
    s = values[root]
    support = _support([s] + [values[c] for c in tree.get(root, ())], cfg.T)
    I, rate = total_impact(s, cfg, support)
    node = DecompositionNode(root, I, I, rate)
    _expand(node, values, tree, cfg, scale=None)
    return node


def tree_names(tree: Mapping[str, Sequence[str]], root: str) -> list[str]:
    out = [root]
    for child in tree.get(root, ()):
        out.extend(tree_names(tree, child))
    return out


def _expand(node, values, tree, cfg, scale):
    kids = list(tree.get(node.factor_name, ()))
    if not kids:
        return
    target = values[node.factor_name]
    if scale is None and len(kids) == 2:
        children = list(decompose_two_factor(values[kids[0]], values[kids[1]], cfg, s=target, names=tuple(kids)))
    else:
        children = decompose_multi_factor(
            {k: values[k] for k in kids}, cfg, parent_impact=node.I, scale=scale, target=target
        )
    node.children = children
    for child in children:
        others = [values[k] for k in kids if k != child.factor_name]
        held = np.prod(np.vstack(others), axis=0)
        child_scale = held if scale is None else scale * held
        _expand(child, values, tree, cfg, child_scale)


def signed_ranks(values: Sequence[float], shares: Sequence[float], labels: Sequence[str]) -> list[int]:
    """Positive values ranked 1.. by descending value, negatives -1.. by ascending.

    Zero gets rank 0. Ties break on larger share first, then label order.
    """
    ranks = [0] * len(values)
    pos = [i for i, v in enumerate(values) if v > 0]
    neg = [i for i, v in enumerate(values) if v < 0]
    pos.sort(key=lambda i: (-values[i], -shares[i], labels[i]))
    neg.sort(key=lambda i: (values[i], -shares[i], labels[i]))
    for r, i in enumerate(pos, 1):
        ranks[i] = r
    for r, i in enumerate(neg, 1):
        ranks[i] = -r
    return ranks


def rank_impacts(records: Sequence[ImpactRecord], factors: Sequence[str] = ()) -> list[ImpactRecord]:
    """Assign signed total-impact, factor-impact and cost ranks in place."""
    records = list(records)
    shares = [r.cost_share for r in records]
    labels = [str(r.key) for r in records]
    for r, rank in zip(records, signed_ranks([r.total_impact for r in records], shares, labels)):
        r.rank = rank
    for r, rank in zip(records, signed_ranks(shares, shares, labels)):
        r.cost_rank = rank
    for name in factors:
        vals = []
        for r in records:
            node = r.factor(name)
            vals.append(node.I if node is not None else 0.0)
        for r, rank in zip(records, signed_ranks(vals, shares, labels)):
            r.factor_ranks[name] = rank
    return records
