"""Network layers, desk-scale architectures and BN -> consumer adjacency.

A :class:`NetworkGraph` is an ordered list of layers and residual blocks.
Prunable channels live in :class:`BnConvPair` objects: a batch-norm layer, the
conv/linear layer that consumes its (activated) output, and the conv layer
that produced its input.  Pairs whose producer is the residual identity path
have no producer; they are "feature-selection" sites and are pruned by masking
rather than by removing filters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor


class GraphError(ValueError):
    """Invalid architecture or channel chain."""


# ---------------------------------------------------------------- layers

class Layer:
    kind = "layer"
    name: str = ""

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def spec(self) -> dict:
        return {"kind": self.kind, "name": self.name}

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int = 1,
                 bias: bool = False, name: str = "", rng: Optional[np.random.Generator] = None):
        if min(c_in, c_out, k, stride) < 1:
            raise GraphError(f"invalid conv {name}: c_in={c_in}, c_out={c_out}, k={k}, stride={stride}")
        self.name = name
        self.k, self.stride, self.padding = k, stride, padding
        self.weight = Tensor(np.zeros((c_out, c_in, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.reset_parameters(rng or np.random.default_rng(0))

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def reset_parameters(self, rng: np.random.Generator):
        # He init on fan-out, as used by the VGG/ResNet CIFAR recipes
        n = self.k * self.k * self.c_out
        self.weight.data[...] = rng.normal(0.0, math.sqrt(2.0 / n), self.weight.shape)
        if self.bias is not None:
            self.bias.data[...] = 0.0

    def enable_bias(self):
        if self.bias is None:
            self.bias = Tensor(np.zeros(self.c_out), requires_grad=True)

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def spec(self):
        return {"kind": self.kind, "name": self.name, "c_in": self.c_in, "c_out": self.c_out,
                "k": self.k, "stride": self.stride, "padding": self.padding,
                "bias": self.bias is not None}

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.c_in:
            raise GraphError(f"{self.name}: expects {self.c_in} input channels, chain provides {c}")
        return (self.c_out, T.conv_output_size(h, self.k, self.stride, self.padding),
                T.conv_output_size(w, self.k, self.stride, self.padding))


class BatchNorm2d(Layer):
    kind = "bn"

    def __init__(self, channels: int, name: str = "", gamma_init: float = 1.0, prunable: bool = True):
        if channels < 1:
            raise GraphError(f"invalid bn {name}: channels={channels}")
        self.name = name
        self.prunable = prunable
        self.gamma = Tensor(np.full(channels, gamma_init), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=T.DTYPE)
        self.running_var = np.ones(channels, dtype=T.DTYPE)
        self.training = True

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def reset_parameters(self, gamma_init: float = 1.0):
        self.gamma.data[...] = gamma_init
        self.beta.data[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode normalized activations before scaling."""
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return (x - self.running_mean.reshape(shape)) / np.sqrt(self.running_var.reshape(shape) + T.BN_EPS)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)

    def spec(self):
        return {"kind": self.kind, "name": self.name, "channels": self.channels, "prunable": self.prunable}

    def out_shape(self, shape):
        if shape[0] != self.channels:
            raise GraphError(f"{self.name}: has {self.channels} channels, chain provides {shape[0]}")
        return shape


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name: str = ""):
        self.name = name

    def forward(self, x):
        return T.relu(x)


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, k: int = 2, name: str = ""):
        self.k = k
        self.name = name

    def forward(self, x):
        return T.max_pool2d(x, self.k)

    def spec(self):
        return {"kind": self.kind, "name": self.name, "k": self.k}

    def out_shape(self, shape):
        c, h, w = shape
        if h < self.k or w < self.k:
            raise GraphError(f"{self.name}: {h}x{w} map too small for {self.k}x{self.k} pooling")
        return (c, h // self.k, w // self.k)


class GlobalAvgPool(Layer):
    """Global average pooling; also flattens to ``(N, C)``."""

    kind = "avgpool"

    def __init__(self, name: str = ""):
        self.name = name

    def forward(self, x):
        return T.global_avg_pool(x)

    def out_shape(self, shape):
        return (shape[0],)


class Linear(Layer):
    kind = "linear"

    def __init__(self, c_in: int, c_out: int, name: str = "", rng: Optional[np.random.Generator] = None):
        if min(c_in, c_out) < 1:
            raise GraphError(f"invalid linear {name}: {c_in} -> {c_out}")
        self.name = name
        self.weight = Tensor(np.zeros((c_out, c_in)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.reset_parameters(rng or np.random.default_rng(0))

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def reset_parameters(self, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(self.c_in)
        self.weight.data[...] = rng.uniform(-bound, bound, self.weight.shape)
        self.bias.data[...] = 0.0

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)

    def spec(self):
        return {"kind": self.kind, "name": self.name, "c_in": self.c_in, "c_out": self.c_out}

    def out_shape(self, shape):
        if shape != (self.c_in,):
            raise GraphError(f"{self.name}: expects ({self.c_in},) input, chain provides {shape}")
        return (self.c_out,)


class ResidualBlock(Layer):
    """Pre-activation bottleneck: BN1 -> select -> ReLU -> Conv1 -> BN2 -> ReLU
    -> Conv2 -> BN3 -> ReLU -> Conv3, plus the identity (or 1x1 downsample) path.

    ``select`` lists the BN1 channels that reach Conv1; the identity path always
    carries all ``in_channels``.
    """

    kind = "residual"

    def __init__(self, in_channels: int, planes: int, out_channels: int, stride: int = 1,
                 name: str = "", rng: Optional[np.random.Generator] = None,
                 mid: Optional[tuple[int, int]] = None, select: Optional[Sequence[int]] = None,
                 downsample: Optional[bool] = None):
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        m1, m2 = mid or (planes, planes)
        self.select = np.arange(in_channels) if select is None else np.asarray(sorted(select), dtype=np.int64)
        if len(self.select) == 0 or self.select.max() >= in_channels or self.select.min() < 0:
            raise GraphError(f"{name}: feature-selection indices out of range for {in_channels} channels")
        self.bn1 = BatchNorm2d(in_channels, f"{name}.bn1")
        self.conv1 = Conv2d(len(self.select), m1, 1, 1, 0, name=f"{name}.conv1", rng=rng)
        self.bn2 = BatchNorm2d(m1, f"{name}.bn2")
        self.conv2 = Conv2d(m1, m2, 3, stride, 1, name=f"{name}.conv2", rng=rng)
        self.bn3 = BatchNorm2d(m2, f"{name}.bn3")
        self.conv3 = Conv2d(m2, out_channels, 1, 1, 0, name=f"{name}.conv3", rng=rng)
        if downsample is None:
            downsample = stride != 1 or in_channels != out_channels
        self.downsample = Conv2d(in_channels, out_channels, 1, stride, 0, name=f"{name}.downsample",
                                 rng=rng) if downsample else None

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.in_channels, dtype=bool)
        m[self.select] = True
        return m

    def sublayers(self) -> list[Layer]:
        subs = [self.bn1, self.conv1, self.bn2, self.conv2, self.bn3, self.conv3]
        if self.downsample is not None:
            subs.append(self.downsample)
        return subs

    def set_training(self, flag: bool):
        for bn in (self.bn1, self.bn2, self.bn3):
            bn.training = flag

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn1.forward(x)
        if len(self.select) != self.in_channels:
            out = T.channel_select(out, self.select)
        out = self.conv1.forward(T.relu(out))
        out = self.conv2.forward(T.relu(self.bn2.forward(out)))
        out = self.conv3.forward(T.relu(self.bn3.forward(out)))
        residual = self.downsample.forward(x) if self.downsample is not None else x
        return T.add(out, residual)

    def spec(self):
        return {"kind": self.kind, "name": self.name, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "stride": self.stride,
                "mid": [self.conv1.c_out, self.conv2.c_out],
                "select": [int(i) for i in self.select],
                "downsample": self.downsample is not None,
                "conv_bias": [c.bias is not None for c in (self.conv1, self.conv2, self.conv3)]}

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise GraphError(f"{self.name}: expects {self.in_channels} channels, chain provides {c}")
        s = self.bn1.out_shape(shape)
        s = (len(self.select),) + s[1:]
        for layer in (self.conv1, self.bn2, self.conv2, self.bn3, self.conv3):
            s = layer.out_shape(s)
        return s


# ---------------------------------------------------------------- graph

@dataclass(eq=False)
class BnConvPair:
    """A BN layer, the layer consuming its activations and the conv feeding it."""

    name: str
    bn: BatchNorm2d
    consumer: Union[Conv2d, Linear]
    producer: Optional[Conv2d]
    path: tuple[Layer, ...]
    block: Optional[ResidualBlock] = None

    @property
    def channels(self) -> int:
        return self.bn.channels

    @property
    def is_feature_selection(self) -> bool:
        return self.producer is None

    @property
    def active(self) -> np.ndarray:
        """BN channel index feeding each consumer input column."""
        if self.block is not None and self.bn is self.block.bn1:
            return self.block.select
        return np.arange(self.channels)


class NetworkGraph:
    """Ordered layers/blocks plus derived BN -> consumer pairs."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple[int, int, int],
                 num_classes: int, arch: str = "sequential", meta: Optional[dict] = None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.arch = arch
        self.meta = dict(meta or {})
        self.training = True
        self._pairs = self._find_pairs()
        self.check_chain()

    # traversal -------------------------------------------------------
    def modules(self) -> Iterator[Layer]:
        for layer in self.layers:
            yield layer
            if isinstance(layer, ResidualBlock):
                yield from layer.sublayers()

    def batchnorms(self) -> list[BatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, BatchNorm2d)]

    def convs(self) -> list[Conv2d]:
        return [m for m in self.modules() if isinstance(m, Conv2d)]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for m in self.modules():
            for k, v in m.params().items():
                out[f"{m.name}.{k}"] = v
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.modules():
            for k, v in m.buffers().items():
                out[f"{m.name}.{k}"] = v
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, flag: bool = True) -> "NetworkGraph":
        self.training = flag
        for bn in self.batchnorms():
            bn.training = flag
        return self

    def eval(self) -> "NetworkGraph":
        return self.train(False)

    def pairs(self) -> list[BnConvPair]:
        return list(self._pairs)

    def prunable_bns(self) -> list[BatchNorm2d]:
        """BN layers whose scaling factors take part in pairs (and in the L1 term)."""
        return [p.bn for p in self._pairs]

    # forward ---------------------------------------------------------
    def forward(self, x: Tensor, capture: Optional[dict] = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        for layer in self.layers:
            if capture is not None:
                capture[layer.name] = x
            if isinstance(layer, ResidualBlock) and capture is not None:
                x = _residual_capture(layer, x, capture)
            else:
                x = layer.forward(x)
        return x

    __call__ = forward

    # structure -------------------------------------------------------
    def check_chain(self) -> list[tuple[int, ...]]:
        """Propagate the input shape; returns the shape after every layer."""
        shapes = []
        s = self.input_shape
        for layer in self.layers:
            s = layer.out_shape(s)
            shapes.append(s)
        if self.layers and s != (self.num_classes,):
            raise GraphError(f"network output {s} does not match num_classes={self.num_classes}")
        return shapes

    def _find_pairs(self) -> list[BnConvPair]:
        pairs: list[BnConvPair] = []
        producer: Optional[Conv2d] = None
        pending: Optional[tuple[BatchNorm2d, Optional[Conv2d], list]] = None
        for layer in self.layers:
            if isinstance(layer, (Conv2d, Linear)):
                if pending is not None:
                    bn, prod, path = pending
                    if prod is None:
                        raise GraphError(f"{bn.name}: prunable BN without a producer conv outside a residual block")
                    pairs.append(BnConvPair(bn.name, bn, layer, prod, tuple(path)))
                    pending = None
                producer = layer if isinstance(layer, Conv2d) else None
            elif isinstance(layer, BatchNorm2d):
                if pending is not None:
                    raise GraphError(f"{layer.name}: two BN layers without a consumer in between")
                if layer.prunable:
                    pending = (layer, producer, [])
                producer = None
            elif isinstance(layer, ResidualBlock):
                if pending is not None:
                    raise GraphError(f"{pending[0].name}: BN output consumed by a residual block "
                                     "(multiple consumers are not supported)")
                b = layer
                pairs.append(BnConvPair(b.bn1.name, b.bn1, b.conv1, None, (ReLU(),), block=b))
                pairs.append(BnConvPair(b.bn2.name, b.bn2, b.conv2, b.conv1, (ReLU(),), block=b))
                pairs.append(BnConvPair(b.bn3.name, b.bn3, b.conv3, b.conv2, (ReLU(),), block=b))
                producer = None
            elif pending is not None:
                pending[2].append(layer)
        if pending is not None:
            raise GraphError(f"{pending[0].name}: BN has no consuming conv/linear layer")
        return pairs

    def descriptor(self) -> dict:
        return {"arch": self.arch, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "meta": self.meta,
                "layers": [layer.spec() for layer in self.layers]}

    @classmethod
    def from_descriptor(cls, desc: dict) -> "NetworkGraph":
        layers = [_layer_from_spec(s) for s in desc["layers"]]
        return cls(layers, tuple(desc["input_shape"]), desc["num_classes"], desc.get("arch", "sequential"),
                   desc.get("meta"))

    def clone(self) -> "NetworkGraph":
        g = NetworkGraph.from_descriptor(self.descriptor())
        src_p, src_b = self.named_parameters(), self.named_buffers()
        for k, v in g.named_parameters().items():
            v.data[...] = src_p[k].data
        for k, v in g.named_buffers().items():
            v[...] = src_b[k]
        g.train(self.training)
        return g

    def reinitialize(self, seed: int, gamma_init: float = 1.0):
        rng = np.random.default_rng(seed)
        for m in self.modules():
            if isinstance(m, (Conv2d, Linear)):
                m.reset_parameters(rng)
            elif isinstance(m, BatchNorm2d):
                m.reset_parameters(gamma_init)


def _residual_capture(block: ResidualBlock, x: Tensor, capture: dict) -> Tensor:
    capture[block.bn1.name] = x
    out = block.bn1.forward(x)
    if len(block.select) != block.in_channels:
        out = T.channel_select(out, block.select)
    out = block.conv1.forward(T.relu(out))
    capture[block.bn2.name] = out
    out = block.conv2.forward(T.relu(block.bn2.forward(out)))
    capture[block.bn3.name] = out
    out = block.conv3.forward(T.relu(block.bn3.forward(out)))
    residual = block.downsample.forward(x) if block.downsample is not None else x
    return T.add(out, residual)


def _layer_from_spec(s: dict) -> Layer:
    kind = s["kind"]
    if kind == "conv":
        return Conv2d(s["c_in"], s["c_out"], s["k"], s["stride"], s["padding"], s["bias"], s["name"])
    if kind == "bn":
        return BatchNorm2d(s["channels"], s["name"], prunable=s.get("prunable", True))
    if kind == "relu":
        return ReLU(s["name"])
    if kind == "maxpool":
        return MaxPool2d(s["k"], s["name"])
    if kind == "avgpool":
        return GlobalAvgPool(s["name"])
    if kind == "linear":
        return Linear(s["c_in"], s["c_out"], s["name"])
    if kind == "residual":
        block = ResidualBlock(s["in_channels"], s["mid"][0], s["out_channels"], s["stride"], s["name"],
                              mid=tuple(s["mid"]), select=s["select"], downsample=s["downsample"])
        for conv, flag in zip((block.conv1, block.conv2, block.conv3), s.get("conv_bias", [False] * 3)):
            if flag:
                conv.enable_bias()
        return block
    raise GraphError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------- builders

VGG_SMALL = [16, 16, "M", 32, 32, "M"]
VGG_CONFIGS = {
    "vgg-small": VGG_SMALL,
    "vgg-small-6": [16, 16, "M", 32, 32, "M", 64, 64],
    "vgg-small-8": [16, 16, "M", 32, 32, "M", 64, 64, "M", 64, 64],
}


def build_vgg(config: Sequence[Union[int, str]] = VGG_SMALL, num_classes: int = 10,
              input_shape: tuple[int, int, int] = (3, 32, 32), seed: int = 0,
              gamma_init: float = 1.0) -> NetworkGraph:
    """Conv-BN-ReLU stack with 'M' max-pool markers, global pooling and a linear head."""
    if isinstance(config, str):
        config = VGG_CONFIGS[config]
    if not config or not any(isinstance(v, int) for v in config):
        raise GraphError("VGG config needs at least one conv width")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    c_in = input_shape[0]
    i = 0
    for v in config:
        if v == "M":
            layers.append(MaxPool2d(2, name=f"pool{i}"))
            continue
        if not isinstance(v, int) or v < 1:
            raise GraphError(f"invalid channel entry {v!r} in VGG config")
        i += 1
        layers += [Conv2d(c_in, v, 3, 1, 1, name=f"conv{i}", rng=rng),
                   BatchNorm2d(v, name=f"bn{i}", gamma_init=gamma_init),
                   ReLU(name=f"relu{i}")]
        c_in = v
    layers += [GlobalAvgPool(name="gap"), Linear(c_in, num_classes, name="fc", rng=rng)]
    return NetworkGraph(layers, input_shape, num_classes, "vgg", {"config": list(config)})


def build_preact_resnet(num_blocks: Union[int, Sequence[int]] = 1, num_classes: int = 10,
                        input_shape: tuple[int, int, int] = (3, 32, 32), seed: int = 0,
                        widths: Sequence[int] = (8, 16, 32), expansion: int = 4,
                        gamma_init: float = 1.0) -> NetworkGraph:
    """Pre-activation bottleneck ResNet.

    ``num_blocks`` is the number of bottleneck blocks per stage (an int applies
    to every stage).  Stages after the first halve the spatial size.
    """
    if isinstance(num_blocks, int):
        num_blocks = [num_blocks] * len(widths)
    if len(num_blocks) != len(widths) or min(num_blocks) < 0 or sum(num_blocks) < 1:
        raise GraphError(f"invalid block layout {num_blocks} for widths {widths}")
    rng = np.random.default_rng(seed)
    stem = widths[0] * 2
    layers: list[Layer] = [Conv2d(input_shape[0], stem, 3, 1, 1, name="conv0", rng=rng)]
    c = stem
    for s, (planes, n) in enumerate(zip(widths, num_blocks)):
        for b in range(n):
            stride = 2 if s > 0 and b == 0 else 1
            layers.append(ResidualBlock(c, planes, planes * expansion, stride, name=f"block{s}.{b}", rng=rng))
            c = planes * expansion
    layers += [BatchNorm2d(c, name="bn_final", prunable=False), ReLU(name="relu_final"),
               GlobalAvgPool(name="gap"), Linear(c, num_classes, name="fc", rng=rng)]
    g = NetworkGraph(layers, input_shape, num_classes, "preact_resnet",
                     {"num_blocks": list(num_blocks), "widths": list(widths), "expansion": expansion})
    for bn in g.batchnorms():
        bn.reset_parameters(gamma_init)
    return g


# ---------------------------------------------------------------- counting

def count_params_flops(graph: NetworkGraph, input_shape: Optional[tuple[int, int, int]] = None) -> tuple[int, int]:
    """Exact parameter count and conv/linear FLOPs (2 per multiply-accumulate)."""
    params = sum(p.data.size for p in graph.parameters())
    if not graph.layers:
        return params, 0
    s = tuple(input_shape or graph.input_shape)
    macs = 0

    def visit(layer, s):
        nonlocal macs
        out = layer.out_shape(s)
        if isinstance(layer, Conv2d):
            macs += layer.c_in * layer.c_out * layer.k * layer.k * out[1] * out[2]
        elif isinstance(layer, Linear):
            macs += layer.c_in * layer.c_out
        return out

    for layer in graph.layers:
        if isinstance(layer, ResidualBlock):
            inner = (len(layer.select),) + s[1:]
            for sub in (layer.conv1, layer.bn2, layer.conv2, layer.bn3, layer.conv3):
                inner = visit(sub, inner)
            if layer.downsample is not None:
                visit(layer.downsample, s)
            s = layer.out_shape(s)
        else:
            s = visit(layer, s)
    return params, 2 * macs
