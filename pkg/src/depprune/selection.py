"""Choosing filters to prune and measuring model sparsity."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .graph import NetworkGraph
from .importance import ImportanceTable

DEFAULT_THRESHOLD = 0.01


class PlanError(ValueError):
    pass


@dataclass
class PrunePlan:
    """Channels to remove per BN -> consumer pair.

    Pairs listed in ``feature_selection`` are residual feature-selection sites:
    their "pruned" channels are masked, not removed, and do not count towards
    sparsity.  ``collapsed`` names pairs where the rule alone would have removed
    every channel (the survivor guard kept one).
    """

    pruned: dict[str, tuple[int, ...]]
    channels: dict[str, int]
    rule: str = "local"
    threshold: Optional[float] = None
    ratio: Optional[float] = None
    feature_selection: frozenset = frozenset()
    collapsed: tuple[str, ...] = ()

    def __post_init__(self):
        for name, idx in self.pruned.items():
            c = self.channels[name]
            if any(i < 0 or i >= c for i in idx):
                raise PlanError(f"{name}: pruned indices {idx} out of range for {c} channels")
            self.pruned[name] = tuple(sorted(set(int(i) for i in idx)))

    def kept(self, name: str) -> np.ndarray:
        drop = set(self.pruned.get(name, ()))
        return np.array([c for c in range(self.channels[name]) if c not in drop], dtype=np.int64)

    def min_surviving(self, include_feature_selection: bool = False) -> int:
        counts = [self.channels[n] - len(self.pruned.get(n, ())) for n in self.channels
                  if include_feature_selection or n not in self.feature_selection]
        return min(counts) if counts else 0

    @property
    def is_empty(self) -> bool:
        return not any(self.pruned.values())

    def union(self, other: "PrunePlan") -> "PrunePlan":
        if self.channels != other.channels:
            raise PlanError("cannot merge plans over different architectures")
        merged = {n: tuple(set(self.pruned.get(n, ())) | set(other.pruned.get(n, ()))) for n in self.channels}
        return PrunePlan(merged, dict(self.channels), "union", feature_selection=self.feature_selection,
                         collapsed=tuple(sorted(set(self.collapsed) | set(other.collapsed))))

    def to_text(self) -> str:
        return json.dumps({
            "rule": self.rule, "threshold": self.threshold, "ratio": self.ratio,
            "channels": self.channels,
            "pruned": {k: list(v) for k, v in self.pruned.items()},
            "feature_selection": sorted(self.feature_selection),
            "collapsed": list(self.collapsed),
        }, indent=2)

    @classmethod
    def from_text(cls, text: str) -> "PrunePlan":
        d = json.loads(text)
        return cls({k: tuple(v) for k, v in d["pruned"].items()}, {k: int(v) for k, v in d["channels"].items()},
                   d["rule"], d.get("threshold"), d.get("ratio"), frozenset(d.get("feature_selection", ())),
                   tuple(d.get("collapsed", ())))


def _guard(scores: np.ndarray, chosen: np.ndarray) -> tuple[np.ndarray, bool]:
    """Keep the best channel (lowest index on ties) if every channel was chosen."""
    if chosen.all():
        chosen = chosen.copy()
        chosen[int(np.argmax(scores))] = False
        return chosen, True
    return chosen, False


def _plan(table: ImportanceTable, chosen: dict[str, np.ndarray], rule: str, **meta) -> PrunePlan:
    pruned, collapsed = {}, []
    for layer in table:
        mask, hit = _guard(np.asarray(layer.score), chosen[layer.name])
        if hit:
            collapsed.append(layer.name)
        pruned[layer.name] = tuple(int(i) for i in np.flatnonzero(mask))
    return PrunePlan(pruned, {l.name: l.channels for l in table}, rule,
                     feature_selection=frozenset(l.name for l in table if l.feature_selection),
                     collapsed=tuple(collapsed), **meta)


def select_local(table: ImportanceTable, p: float = DEFAULT_THRESHOLD) -> PrunePlan:
    """Per layer, prune channels with ``score <= max(score) * p``."""
    if not 0 < p < 1:
        raise PlanError(f"threshold p must lie in (0, 1), got {p}")
    if len(table) == 0:
        raise PlanError("importance table is empty")
    chosen = {}
    for layer in table:
        s = np.asarray(layer.score)
        chosen[layer.name] = s <= s.max() * p
    return _plan(table, chosen, "local", threshold=p)


def select_global(table: ImportanceTable, r: float) -> PrunePlan:
    """Prune the ``floor(r * total)`` lowest-scoring channels network-wide.

    Ties are broken by (layer position, channel index) ascending.
    """
    if not 0 < r < 1:
        raise PlanError(f"ratio r must lie in (0, 1), got {r}")
    entries = [(float(s), li, c) for li, layer in enumerate(table) for c, s in enumerate(layer.score)]
    # exact floor even when r * total lands a hair under an integer in binary
    count = math.floor(Fraction(str(r)) * len(entries))
    entries.sort()
    chosen = {layer.name: np.zeros(layer.channels, dtype=bool) for layer in table}
    names = [layer.name for layer in table]
    for _, li, c in entries[:count]:
        chosen[names[li]][c] = True
    return _plan(table, chosen, "global", ratio=r)


def select_uniform(table: ImportanceTable, r: float) -> PrunePlan:
    """Reference pre-defined-target rule: the ``floor(r * C)`` weakest per layer."""
    if not 0 < r < 1:
        raise PlanError(f"ratio r must lie in (0, 1), got {r}")
    chosen = {}
    for layer in table:
        order = np.argsort(np.asarray(layer.score), kind="stable")
        mask = np.zeros(layer.channels, dtype=bool)
        mask[order[:math.floor(Fraction(str(r)) * layer.channels)]] = True
        chosen[layer.name] = mask
    return _plan(table, chosen, "uniform", ratio=r)


@dataclass(frozen=True)
class SparsityReading:
    pruned: int
    total: int

    @property
    def value(self) -> float:
        return self.pruned / self.total if self.total else 0.0

    def __float__(self):
        return self.value


def model_sparsity(plan: PrunePlan, graph: Optional[NetworkGraph] = None) -> SparsityReading:
    """Fraction of prunable filters in the plan; feature-selection masks excluded."""
    if graph is not None:
        expected = {p.name: p.channels for p in graph.pairs()}
        if expected != plan.channels:
            diff = sorted(set(expected.items()) ^ set(plan.channels.items()))
            raise PlanError(f"plan does not match graph pairs: {diff}")
    num = den = 0
    for name, c in plan.channels.items():
        if name in plan.feature_selection:
            continue
        num += len(plan.pruned.get(name, ()))
        den += c
    return SparsityReading(num, den)
