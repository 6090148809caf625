"""Train -> prune -> finetune pipeline."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .controller import ControllerState, apply_l1, controller_step
from .data import Dataset, load_dataset
from .graph import VGG_CONFIGS, NetworkGraph, build_preact_resnet, build_vgg
from .importance import ImportanceTable, compute_importance
from .pruner import PruneTranscript, absorb_bias, prune_graph
from .selection import PrunePlan, model_sparsity, select_global, select_local

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    dataset: str = "digits"
    arch: str = "vgg-small"
    num_blocks: int = 1
    data_root: str = ""
    per_class: int = 0
    pad: int = -1  # -1: dataset default
    epochs_stage1: int = 20
    epochs_stage3: int = 20
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    wd_bn: bool = True
    gamma_init: float = 1.0
    p: float = 0.01
    r: float = 0.5
    delta_lambda: float = 1e-5
    constant_lambda: bool = False
    fixed_lambda: float = 1e-5
    rule: str = "local"
    importance: str = "dependency"
    norm: str = "l2"
    scratch: bool = False
    absorb_bias: bool = False
    seed: int = 1

    def __post_init__(self):
        if not 0 < self.r < 1 or not 0 < self.p < 1:
            raise ConfigError(f"r and p must lie in (0, 1), got r={self.r}, p={self.p}")
        for name in ("lr", "momentum", "weight_decay", "delta_lambda", "fixed_lambda"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.epochs_stage1 < 0 or self.epochs_stage3 < 0 or self.batch_size < 1:
            raise ConfigError("epoch counts must be >= 0 and batch_size >= 1")
        if self.rule not in ("local", "global"):
            raise ConfigError(f"rule must be 'local' or 'global', got {self.rule!r}")
        if self.importance not in ("dependency", "gamma"):
            raise ConfigError(f"importance must be 'dependency' or 'gamma', got {self.importance!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        out = {}
        for k, v in d.items():
            typ = type(getattr(cls, k)) if hasattr(cls, k) else type(known[k].default)
            out[k] = _coerce(k, v, typ)
        return cls(**out)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(key: str, value, typ):
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    try:
        if typ is bool:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: cannot read {value!r} as {typ.__name__}") from exc


# ---------------------------------------------------------------- building blocks

def build_model(cfg: TrainConfig, input_shape, num_classes: int = 10) -> NetworkGraph:
    if cfg.arch in VGG_CONFIGS:
        return build_vgg(cfg.arch, num_classes, input_shape, cfg.seed, cfg.gamma_init)
    if cfg.arch == "preact-resnet":
        return build_preact_resnet(cfg.num_blocks, num_classes, input_shape, cfg.seed, gamma_init=cfg.gamma_init)
    raise ConfigError(f"unknown arch {cfg.arch!r}")


def load_splits(cfg: TrainConfig) -> dict[str, Dataset]:
    kw = dict(root=cfg.data_root or None, seed=cfg.seed, per_class=cfg.per_class or None,
              pad=None if cfg.pad < 0 else cfg.pad)
    return {s: load_dataset(cfg.dataset, s, **kw) for s in ("train", "val", "test")}


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay added to the gradient."""

    def __init__(self, graph: NetworkGraph, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4,
                 decay_bn: bool = True):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        bn_ids = {id(t) for bn in graph.batchnorms() for t in bn.params().values()}
        self.params = [(p, weight_decay if decay_bn or id(p) not in bn_ids else 0.0) for p in graph.parameters()]
        self.velocity = {id(p): np.zeros_like(p.data) for p, _ in self.params}

    def step(self):
        for p, wd in self.params:
            if p.grad is None:
                continue
            g = p.grad + wd * p.data if wd else p.grad
            v = self.velocity[id(p)]
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.data.dtype)


def train_epoch(graph: NetworkGraph, data: Dataset, opt: SGD, rng: np.random.Generator,
                batch_size: int, lam: float = 0.0) -> tuple[float, float]:
    graph.train()
    total_loss, correct, seen = 0.0, 0, 0
    for x, y in data.batches(batch_size, rng, augment=True):
        graph.zero_grad()
        logits = graph(T.Tensor(x))
        loss = T.softmax_cross_entropy(logits, y)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} after {seen} samples")
        loss.backward()
        apply_l1(graph, lam)
        opt.step()
        total_loss += value * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
        seen += len(y)
    return total_loss / max(seen, 1), correct / max(seen, 1)


def evaluate(graph: NetworkGraph, data: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode."""
    graph.eval()
    correct = 0
    with T.no_grad():
        for x, y in data.batches(batch_size):
            correct += int((graph(T.Tensor(x)).data.argmax(axis=1) == y).sum())
    return correct / len(data) if len(data) else 0.0


def measure_sparsity(graph: NetworkGraph, cfg: TrainConfig) -> float:
    table = compute_importance(graph, cfg.importance, cfg.norm)
    return model_sparsity(select_local(table, cfg.p), graph).value


def bn_l1(graph: NetworkGraph) -> float:
    return float(sum(np.abs(bn.gamma.data).sum() for bn in graph.prunable_bns()))


# ---------------------------------------------------------------- reports

REPORT_FIELDS = ["epoch", "lr", "lambda", "train_loss", "train_acc", "val_acc", "sparsity"]


@dataclass
class StageReport:
    stage: str
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.epochs:
            w.writerow({k: row[k] for k in REPORT_FIELDS})
        return buf.getvalue()


# ---------------------------------------------------------------- stages

def train_stage1_sparsity(graph: NetworkGraph, cfg: TrainConfig, splits: dict[str, Dataset],
                          rng: Optional[np.random.Generator] = None
                          ) -> tuple[NetworkGraph, ControllerState, StageReport]:
    """Sparsity training at a fixed learning rate with epoch-end lambda control."""
    rng = rng or np.random.default_rng(cfg.seed)
    start = time.perf_counter()
    n = cfg.epochs_stage1
    state = ControllerState(N=n, r=cfg.r, delta_lambda=cfg.delta_lambda)
    opt = SGD(graph, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.wd_bn)
    report = StageReport("train")
    lam = cfg.fixed_lambda if cfg.constant_lambda else state.lam
    for epoch in range(1, n + 1):
        loss, acc = train_epoch(graph, splits["train"], opt, rng, cfg.batch_size, lam)
        sparsity = measure_sparsity(graph, cfg)
        report.epochs.append(dict(epoch=epoch, lr=cfg.lr, train_loss=loss, train_acc=acc,
                                  val_acc=evaluate(graph, splits["val"]), sparsity=sparsity,
                                  **{"lambda": lam}))
        if not cfg.constant_lambda:
            state = controller_step(state, sparsity)
            lam = state.lam
        log.info("stage1 epoch %d loss %.4f acc %.3f P %.3f lambda %.2e", epoch, loss, acc, sparsity, lam)
    report.wall_time = time.perf_counter() - start
    return graph, state, report


def prune_stage(graph: NetworkGraph, cfg: TrainConfig
                ) -> tuple[NetworkGraph, PrunePlan, PruneTranscript, ImportanceTable]:
    table = compute_importance(graph, cfg.importance, cfg.norm)
    plan = select_local(table, cfg.p) if cfg.rule == "local" else select_global(table, cfg.r)
    source = absorb_bias(graph, plan)[0] if cfg.absorb_bias else graph
    pruned, transcript = prune_graph(source, plan)
    return pruned, plan, transcript, table


def lr_at(epoch: int, total: int, base: float) -> float:
    """Step decay /10 at 50% and 75% of ``total`` (``epoch`` is 0-based)."""
    drops = sum(epoch >= m for m in (int(0.5 * total), int(0.75 * total)))
    return base * 0.1 ** drops


def finetune_stage3(graph: NetworkGraph, cfg: TrainConfig, splits: dict[str, Dataset],
                    rng: Optional[np.random.Generator] = None,
                    epochs: Optional[int] = None) -> tuple[NetworkGraph, StageReport]:
    """Standard training with step learning-rate decay; re-initializes first in scratch mode."""
    rng = rng or np.random.default_rng(cfg.seed + 7919)
    epochs = cfg.epochs_stage3 if epochs is None else epochs
    if cfg.scratch:
        graph.reinitialize(cfg.seed + 104729, cfg.gamma_init)
    start = time.perf_counter()
    opt = SGD(graph, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.wd_bn)
    report = StageReport("scratch" if cfg.scratch else "finetune")
    for epoch in range(epochs):
        opt.lr = lr_at(epoch, epochs, cfg.lr)
        loss, acc = train_epoch(graph, splits["train"], opt, rng, cfg.batch_size)
        report.epochs.append(dict(epoch=epoch + 1, lr=opt.lr, train_loss=loss, train_acc=acc,
                                  val_acc=evaluate(graph, splits["val"]),
                                  sparsity=float("nan"), **{"lambda": 0.0}))
        log.info("stage3 epoch %d lr %.0e loss %.4f acc %.3f", epoch + 1, opt.lr, loss, acc)
    report.wall_time = time.perf_counter() - start
    return graph, report


@dataclass
class PipelineResult:
    config: TrainConfig
    acc_before_prune: float
    acc_after_prune: float
    acc_after_finetune: float
    final_sparsity: float
    controller: ControllerState
    plan: PrunePlan
    transcript: PruneTranscript
    importance: ImportanceTable
    reports: dict[str, StageReport]
    trained: NetworkGraph
    pruned: NetworkGraph
    finetuned: NetworkGraph

    @property
    def min_surviving(self) -> int:
        return self.plan.min_surviving()


def run_pipeline(cfg: TrainConfig, splits: Optional[dict[str, Dataset]] = None) -> PipelineResult:
    splits = splits or load_splits(cfg)
    rng = np.random.default_rng(cfg.seed)
    graph = build_model(cfg, splits["train"].shape)
    graph, state, r1 = train_stage1_sparsity(graph, cfg, splits, rng)
    acc0 = evaluate(graph, splits["test"])
    pruned, plan, transcript, table = prune_stage(graph, cfg)
    acc1 = evaluate(pruned, splits["test"])
    tuned, r3 = finetune_stage3(pruned.clone(), cfg, splits, rng)
    acc2 = evaluate(tuned, splits["test"])
    return PipelineResult(cfg, acc0, acc1, acc2, measure_sparsity(graph, cfg), state, plan, transcript, table,
                          {"train": r1, "finetune": r3}, graph, pruned, tuned)


def train_control(cfg: TrainConfig, epochs: int, splits: Optional[dict[str, Dataset]] = None
                  ) -> tuple[NetworkGraph, float]:
    """Unpruned model under the finetune recipe for ``epochs`` epochs (no sparsity)."""
    splits = splits or load_splits(cfg)
    rng = np.random.default_rng(cfg.seed)
    graph = build_model(cfg, splits["train"].shape)
    graph, _ = finetune_stage3(graph, cfg, splits, rng, epochs=epochs)
    return graph, evaluate(graph, splits["test"])

