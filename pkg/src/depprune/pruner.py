"""Turn a :class:`PrunePlan` into a physically smaller network."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .graph import BatchNorm2d, Conv2d, NetworkGraph, count_params_flops
from .selection import PrunePlan, PlanError
from .tensor import Tensor


class UnprunableSiteError(PlanError):
    pass


@dataclass
class LayerTranscript:
    name: str
    channels: int
    kept: list[int]
    feature_selection: bool
    producer: str = ""
    consumer: str = ""


@dataclass
class PruneTranscript:
    layers: list[LayerTranscript] = field(default_factory=list)
    before: tuple[int, int] = (0, 0)
    after: tuple[int, int] = (0, 0)
    collapsed: tuple[str, ...] = ()
    filters_pruned: int = 0

    def to_text(self) -> str:
        return json.dumps({
            "before": {"params": self.before[0], "flops": self.before[1]},
            "after": {"params": self.after[0], "flops": self.after[1]},
            "filters_pruned": self.filters_pruned,
            "collapsed": list(self.collapsed),
            "layers": [vars(l) for l in self.layers],
        }, indent=2)

    def distribution_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "channels", "kept", "feature_selection"])
        for l in self.layers:
            w.writerow([l.name, l.channels, len(l.kept), int(l.feature_selection)])
        return buf.getvalue()


def _slice(t: Tensor, index: np.ndarray, axis: int) -> Tensor:
    return Tensor(np.take(t.data, index, axis=axis), requires_grad=t.requires_grad)


def _slice_bn(bn: BatchNorm2d, keep: np.ndarray):
    bn.gamma = _slice(bn.gamma, keep, 0)
    bn.beta = _slice(bn.beta, keep, 0)
    bn.running_mean = bn.running_mean[keep].copy()
    bn.running_var = bn.running_var[keep].copy()


def _slice_out(conv: Conv2d, keep: np.ndarray):
    conv.weight = _slice(conv.weight, keep, 0)
    if conv.bias is not None:
        conv.bias = _slice(conv.bias, keep, 0)


def _slice_in(layer, keep: np.ndarray):
    layer.weight = _slice(layer.weight, keep, 1)


def _check(graph: NetworkGraph, plan: PrunePlan):
    pairs = {p.name: p for p in graph.pairs()}
    for name, c in plan.channels.items():
        if name in pairs and pairs[name].channels != c:
            raise PlanError(f"{name}: plan expects {c} channels, graph has {pairs[name].channels}")
    for name, idx in plan.pruned.items():
        if name not in pairs:
            if idx:
                raise UnprunableSiteError(f"{name!r} is not a prunable BN -> consumer pair")
            continue
        if len(idx) >= pairs[name].channels:
            raise PlanError(f"{name}: plan removes every channel (survivor guard violated)")
        if pairs[name].is_feature_selection:
            remaining = set(pairs[name].active.tolist()) - set(idx)
            if not remaining:
                raise PlanError(f"{name}: feature selection would leave no channel for the consumer")


def prune_graph(graph: NetworkGraph, plan: PrunePlan) -> tuple[NetworkGraph, PruneTranscript]:
    """Return a pruned copy of ``graph`` and the audit transcript.

    For filter sites the producer conv loses output filters, the BN loses the
    matching entries (running statistics are sliced) and the consumer loses the
    matching input channels.  Feature-selection sites only shrink the residual
    block's ``select`` list and the consumer's input.
    """
    _check(graph, plan)
    before = count_params_flops(graph)
    g = graph.clone()
    transcript = PruneTranscript(before=before, collapsed=plan.collapsed)
    for pair in g.pairs():
        drop = set(plan.pruned.get(pair.name, ()))
        width = pair.channels
        keep = np.array([c for c in range(width) if c not in drop], dtype=np.int64)
        if pair.is_feature_selection:
            block = pair.block
            positions = np.array([i for i, c in enumerate(block.select) if c not in drop], dtype=np.int64)
            kept_channels = block.select[positions]
            if len(positions) != len(block.select):
                _slice_in(pair.consumer, positions)
                block.select = kept_channels.copy()
            transcript.layers.append(LayerTranscript(pair.name, width, kept_channels.tolist(), True,
                                                     "", pair.consumer.name))
            continue
        if drop:
            _slice_out(pair.producer, keep)
            _slice_bn(pair.bn, keep)
            _slice_in(pair.consumer, keep)
            transcript.filters_pruned += len(drop)
        transcript.layers.append(LayerTranscript(pair.name, width, keep.tolist(), False,
                                                 pair.producer.name, pair.consumer.name))
    new = NetworkGraph(g.layers, g.input_shape, g.num_classes, g.arch, g.meta)
    new.train(graph.training)
    transcript.after = count_params_flops(new)
    return new, transcript


@dataclass
class AbsorbReport:
    shifted: dict[str, int] = field(default_factory=dict)
    padding_edge: list[str] = field(default_factory=list)


def absorb_bias(graph: NetworkGraph, plan: PrunePlan) -> tuple[NetworkGraph, AbsorbReport]:
    """Fold the constant ``relu(beta_c)`` output of every planned channel into
    the consumer's bias, treating the channel's scaled activation as zero.

    Exact for interior pixels only: consumers with padding see zeros at the
    border instead of the constant, and such consumers are listed in
    ``padding_edge``.
    """
    _check(graph, plan)
    g = graph.clone()
    report = AbsorbReport()
    for pair in g.pairs():
        drop = [c for c in plan.pruned.get(pair.name, ()) if c in set(pair.active.tolist())]
        if not drop:
            continue
        const = np.maximum(pair.bn.beta.data.astype(np.float64), 0.0)
        if not np.any(const[drop]):
            continue
        consumer = pair.consumer
        columns = {int(c): i for i, c in enumerate(pair.active)}
        w = consumer.weight.data.astype(np.float64)
        shift = np.zeros(w.shape[0])
        for c in drop:
            col = w[:, columns[c]]
            shift += const[c] * (col.reshape(w.shape[0], -1).sum(axis=1))
        if isinstance(consumer, Conv2d):
            consumer.enable_bias()
            if consumer.padding and consumer.k > 1:
                report.padding_edge.append(consumer.name)
        consumer.bias.data[...] = consumer.bias.data + shift.astype(consumer.bias.data.dtype)
        report.shifted[consumer.name] = len(drop)
    out = NetworkGraph(g.layers, g.input_shape, g.num_classes, g.arch, g.meta)
    out.train(graph.training)
    return out, report


def zero_planned(graph: NetworkGraph, plan: PrunePlan) -> NetworkGraph:
    """Copy of ``graph`` with gamma and beta of every planned channel set to 0."""
    g = graph.clone()
    for pair in g.pairs():
        idx = list(plan.pruned.get(pair.name, ()))
        pair.bn.gamma.data[idx] = 0.0
        pair.bn.beta.data[idx] = 0.0
    return g

