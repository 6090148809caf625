"""Dependency-aware channel importance.

The score of channel ``c`` at a BN layer is ``|gamma_c|`` times the norm of
the block of the next layer's unfolded kernel that reads channel ``c``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .graph import BnConvPair, Conv2d, GlobalAvgPool, Linear, MaxPool2d, NetworkGraph, ReLU
from .tensor import ShapeError, no_grad

NORMS = ("l2", "l1")
MEASURES = ("dependency", "gamma")


class UnsupportedActivationError(ValueError):
    pass


def channel_norms(weight: np.ndarray, norm: str = "l2") -> np.ndarray:
    """Per-input-channel norm of an unfolded conv kernel or a linear matrix.

    A ``(C_out, C_in)`` linear weight is treated as a 1x1 convolution.
    """
    weight = np.asarray(weight)
    if weight.ndim == 2:
        weight = weight[:, :, None, None]
    if weight.ndim != 4:
        raise ShapeError(f"channel_norms expects a 4-d kernel or 2-d matrix, got shape {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    blocks = T.unfold_weight(weight).reshape(c_out, c_in, k * k).astype(np.float64)
    if norm == "l2":
        out = np.sqrt((blocks ** 2).sum(axis=(0, 2)))
    elif norm == "l1":
        out = np.abs(blocks).sum(axis=(0, 2))
    else:
        raise ValueError(f"unknown norm {norm!r}; choose from {NORMS}")
    return out.astype(T.DTYPE)


@dataclass
class LayerImportance:
    name: str
    gamma: np.ndarray
    weight_norm: np.ndarray
    score: np.ndarray
    feature_selection: bool = False

    @property
    def channels(self) -> int:
        return len(self.score)


@dataclass
class ImportanceTable:
    layers: list[LayerImportance] = field(default_factory=list)
    measure: str = "dependency"
    norm: str = "l2"

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, name: str) -> LayerImportance:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @classmethod
    def from_scores(cls, scores: dict[str, "np.ndarray | list"], feature_selection=()) -> "ImportanceTable":
        """Build a table straight from score vectors (unit weight norms)."""
        layers = []
        for name, s in scores.items():
            s = np.asarray(s, dtype=np.float64)
            layers.append(LayerImportance(name, s.copy(), np.ones_like(s), s.copy(), name in feature_selection))
        return cls(layers, measure="given")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "channel", "gamma", "weight_norm", "score"])
        for layer in self.layers:
            for c in range(layer.channels):
                w.writerow([layer.name, c, repr(float(layer.gamma[c])), repr(float(layer.weight_norm[c])),
                            repr(float(layer.score[c]))])
        return buf.getvalue()


def _pair_norms(pair: BnConvPair, norm: str) -> np.ndarray:
    per_input = channel_norms(pair.consumer.weight.data, norm)
    out = np.zeros(pair.channels, dtype=T.DTYPE)
    out[pair.active] = per_input
    return out


def compute_importance(graph: NetworkGraph, measure: str = "dependency", norm: str = "l2") -> ImportanceTable:
    """Score every BN -> consumer pair of ``graph``.

    ``measure="gamma"`` gives the plain ``|gamma|`` ranking signal used by the
    global baseline.  Channels already removed by feature selection score 0.
    """
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}; choose from {MEASURES}")
    layers = []
    for pair in graph.pairs():
        gamma = pair.bn.gamma.data.copy()
        wn = _pair_norms(pair, norm)
        if measure == "dependency":
            score = np.abs(gamma) * wn
        else:
            score = np.abs(gamma).astype(T.DTYPE)
            if pair.is_feature_selection:
                score = np.where(wn > 0, score, 0).astype(T.DTYPE)
        layers.append(LayerImportance(pair.name, gamma, wn, score, pair.is_feature_selection))
    return ImportanceTable(layers, measure, norm)


# ---------------------------------------------------------------- bound check

@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + 1e-4 * self.rhs


def _channelwise(x: np.ndarray, layer, abs_only: bool) -> np.ndarray:
    if isinstance(layer, ReLU):
        return x if abs_only else np.maximum(x, 0)
    if isinstance(layer, MaxPool2d):
        with no_grad():
            return T.max_pool2d(T.Tensor(x, dtype=x.dtype), layer.k).data
    return x.mean(axis=(2, 3))


def _consume(z: np.ndarray, consumer) -> np.ndarray:
    if isinstance(consumer, Linear):
        return z @ consumer.weight.data.astype(np.float64).T
    with no_grad():
        return T.conv2d(T.Tensor(z, dtype=np.float64), T.Tensor(consumer.weight.data, dtype=np.float64),
                        None, consumer.stride, consumer.padding).data


def _unfold(x: np.ndarray, consumer) -> np.ndarray:
    """Per-channel unfolded activations, ``(C, k*k, N*L)``."""
    if x.ndim == 2:
        return x.T[:, None, :]
    k = consumer.k
    cols = T.im2col(x, k, consumer.stride, consumer.padding)  # (N, C*k*k, L)
    n, _, l = cols.shape
    c = x.shape[1]
    return cols.reshape(n, c, k * k, l).transpose(1, 2, 0, 3).reshape(c, k * k, n * l)


def verify_dependency_bound(graph: NetworkGraph, x, pairs: Optional[list[BnConvPair]] = None) -> list[BoundReport]:
    """Check ``||F|| <= sum_c |gamma_c| ||W_c|| ||X_c||`` for every BN -> consumer pair.

    Shift and bias terms are omitted from the path, and ``X_c`` is the
    eval-mode normalized input of the BN.  Max/avg pooling between the BN and
    its consumer is channel-wise and monotone, so the pooled ``|X_c|`` bounds
    the pooled activations elementwise.
    """
    graph.eval()
    pairs = graph.pairs() if pairs is None else pairs
    for pair in pairs:
        for layer in pair.path:
            if not isinstance(layer, (ReLU, MaxPool2d, GlobalAvgPool)):
                raise UnsupportedActivationError(
                    f"{pair.name}: layer {layer.name!r} of kind {layer.kind!r} between BN and consumer "
                    "is not supported (ReLU and pooling only)")
    capture: dict = {}
    with no_grad():
        graph.forward(T.Tensor(x), capture=capture)
    reports = []
    for pair in pairs:
        xin = capture[pair.bn.name].data.astype(np.float64)
        xn = pair.bn.normalize(xin)[:, pair.active]
        gamma = pair.bn.gamma.data.astype(np.float64)[pair.active]
        z = xn * gamma.reshape((1, -1) + (1,) * (xn.ndim - 2))
        xa = np.abs(xn)
        for layer in pair.path:
            z = _channelwise(z, layer, False)
            xa = _channelwise(xa, layer, True)
        f = _consume(z, pair.consumer)
        lhs = float(np.sqrt((f ** 2).sum()))
        w = pair.consumer.weight.data.astype(np.float64)
        if w.ndim == 2:
            w = w[:, :, None, None]
        wn = np.sqrt((w ** 2).sum(axis=(0, 2, 3)))
        xt = _unfold(xa, pair.consumer)
        xnorm = np.sqrt((xt ** 2).sum(axis=(1, 2)))
        rhs = float((np.abs(gamma) * wn * xnorm).sum())
        reports.append(BoundReport(pair.name, lhs, rhs))
    return reports
