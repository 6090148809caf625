"""Synthetic stand-ins for trained networks.

* :func:`synthetic_importance` draws per-layer scaling-factor statistics whose
  scale differs from layer to layer, the situation in which global ranking
  empties whole layers.
* :class:`Plant` maps the L1 coefficient to model sparsity so the
  regularization controller can be run in closed loop without training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .controller import DELTA_LAMBDA, ControllerState, controller_step
from .importance import ImportanceTable
from .selection import PrunePlan, model_sparsity, select_local


def synthetic_importance(seed: int, widths: Sequence[int] = (16, 16, 32, 32, 64, 64, 64, 64),
                         decades: float = 2.0, sigma: float = 0.6) -> ImportanceTable:
    """Per-layer |gamma| ~ scale_l * lognormal(0, sigma), with log10(scale_l) uniform over ``decades``."""
    rng = np.random.default_rng(seed)
    scores = {}
    for i, w in enumerate(widths):
        scale = 10.0 ** rng.uniform(-decades, 0.0)
        scores[f"layer{i}"] = scale * rng.lognormal(0.0, sigma, w)
    return ImportanceTable.from_scores(scores)


def p_for_ratio(table: ImportanceTable, r: float, tol: float = 1e-6) -> float:
    """Smallest threshold p whose local selection prunes at least a fraction ``r``
    of channels (bisection; local sparsity is monotone in p).  Returns the
    largest admissible p below 1 when ``r`` is out of reach."""
    lo, hi = 0.0, 1.0 - 1e-9

    def sparsity(p):
        return model_sparsity(select_local(table, p)).value

    if sparsity(hi) < r:
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid > 0 and sparsity(mid) >= r:
            hi = mid
        else:
            lo = mid
    return hi


def raw_min_surviving(plan: PrunePlan) -> int:
    """Smallest layer width the rule itself left, ignoring the survivor guard."""
    if any(n in plan.collapsed for n in plan.channels if n not in plan.feature_selection):
        return 0
    return plan.min_surviving()


@dataclass
class Plant:
    """Sparsity response ``P = p_max * (1 - exp(-lam / kappa))`` approached with lag ``alpha``."""

    kappa: float
    p_max: float = 0.95
    alpha: float = 1.0

    def steady(self, lam: float) -> float:
        return self.p_max * (1.0 - math.exp(-lam / self.kappa))

    def respond(self, lam: float, prev: float) -> float:
        return prev + self.alpha * (self.steady(lam) - prev)


def run_closed_loop(plant: Plant, N: int, r: float, delta_lambda: float = DELTA_LAMBDA) -> ControllerState:
    """Drive ``plant`` with the controller for ``N`` epochs."""
    state = ControllerState(N=N, r=r, delta_lambda=delta_lambda)
    P = 0.0
    for _ in range(N):
        P = min(max(plant.respond(state.lam, P), 0.0), 1.0)
        state = controller_step(state, P)
    return state
