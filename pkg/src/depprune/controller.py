"""Epoch-end feedback control of the L1 coefficient on BN scaling factors."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import NetworkGraph

DELTA_LAMBDA = 1e-5


class ControllerError(ValueError):
    pass


@dataclass(frozen=True)
class ControllerRecord:
    epoch: int
    sparsity: float
    lam: float
    action: str  # "increase" | "decrease" | "hold"
    over_target_increase: bool = False


@dataclass(frozen=True)
class ControllerState:
    """``t`` is the 1-based epoch about to be evaluated; ``lam`` is in force during it."""

    N: int
    r: float
    delta_lambda: float = DELTA_LAMBDA
    t: int = 1
    lam: float = 0.0
    P_prev: float = 0.0
    history: tuple[ControllerRecord, ...] = field(default=())

    def __post_init__(self):
        if self.N < 0:
            raise ControllerError(f"N must be >= 0, got {self.N}")
        if not 0 < self.r < 1:
            raise ControllerError(f"target ratio r must lie in (0, 1), got {self.r}")
        if self.delta_lambda < 0 or self.lam < 0:
            raise ControllerError("lambda and its step must be non-negative")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lambda", "sparsity"])
        for rec in self.history:
            w.writerow([rec.epoch, repr(rec.lam), repr(rec.sparsity)])
        return buf.getvalue()


def required_gain(state: ControllerState) -> float:
    return (state.r - state.P_prev) / (state.N - state.t + 1)


def controller_step(state: ControllerState, P_t: float) -> ControllerState:
    """Advance one epoch given the sparsity ``P_t`` measured at its end.

    Raise lambda when the epoch's sparsity gain falls short of the linear
    schedule towards ``r``; otherwise lower it (clamped at 0) if the model is
    already over-sparse.
    """
    if state.t > state.N:
        raise ControllerError(f"epoch {state.t} exceeds the planned {state.N} epochs")
    if not 0.0 <= P_t <= 1.0:
        raise ControllerError(f"sparsity must lie in [0, 1], got {P_t}")
    lam = state.lam
    flagged = False
    if P_t - state.P_prev < required_gain(state):
        lam = lam + state.delta_lambda
        action = "increase"
        flagged = P_t > state.r
    elif P_t > state.r:
        lam = max(0.0, lam - state.delta_lambda)
        action = "decrease"
    else:
        action = "hold"
    rec = ControllerRecord(state.t, float(P_t), lam, action, flagged)
    return replace(state, t=state.t + 1, lam=lam, P_prev=float(P_t), history=state.history + (rec,))


def l1_penalty(graph: NetworkGraph, lam: float) -> tuple[float, dict[str, np.ndarray]]:
    """``lam * sum |gamma|`` over prunable BN layers and its subgradient (sign(0) = 0)."""
    if lam < 0:
        raise ControllerError(f"lambda must be non-negative, got {lam}")
    value = 0.0
    grads = {}
    for bn in graph.prunable_bns():
        g = bn.gamma.data
        value += lam * float(np.abs(g.astype(np.float64)).sum())
        grads[bn.name] = (lam * np.sign(g)).astype(g.dtype)
    return value, grads


def apply_l1(graph: NetworkGraph, lam: float):
    """Add the L1 subgradient to the gamma gradients after a backward pass."""
    if lam == 0:
        return
    _, grads = l1_penalty(graph, lam)
    for bn in graph.prunable_bns():
        g = grads[bn.name]
        bn.gamma.grad = g.copy() if bn.gamma.grad is None else bn.gamma.grad + g
