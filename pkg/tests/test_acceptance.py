"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The desk-scale experiments (criteria 7 to 9) train VGG-small on the bundled
8x8 digits with ``configs/desk.toml`` and take a few minutes on one CPU.
"""
import dataclasses
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from depprune import tensor as T
from depprune.checkpoint import dumps, loads
from depprune.cli import SCHEMAS, main, resolve_config
from depprune.controller import DELTA_LAMBDA, ControllerState, controller_step
from depprune.data import parse_cifar_batch, parse_idx
from depprune.importance import ImportanceTable, compute_importance, verify_dependency_bound
from depprune.pruner import prune_graph, zero_planned
from depprune.selection import PrunePlan, model_sparsity, select_global, select_local
from depprune.simulate import Plant, p_for_ratio, raw_min_surviving, run_closed_loop, synthetic_importance
from depprune.tensor import Tensor, no_grad
from depprune.train import (evaluate, finetune_stage3, load_splits, prune_stage, run_pipeline, train_control,
                            train_stage1_sparsity, build_model)
from builders import random_graph
from oracles import (analytic_grads, away_from_zero, global_oracle, local_oracle, numerical_grads, rel_error,
                     slice_norms)

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.toml"
SEEDS = (1, 2, 3)


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1


def _grad_cases():
    def proj(out, r):
        return T.tsum(T.mul(out, Tensor(r, dtype=out.data.dtype)))

    def conv(rng):
        x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        r = rng.normal(size=T.conv2d(Tensor(x), Tensor(w), None, s, p).shape)
        return (lambda x, w, b: proj(T.conv2d(x, w, b, s, p), r)), [x, w, b]

    def bn(rng):
        x, g, b = rng.normal(size=(4, 3, 2, 2)), rng.normal(size=3), rng.normal(size=3)
        r = rng.normal(size=x.shape)
        train = bool(rng.integers(0, 2))
        m, v = rng.normal(size=3), rng.uniform(0.5, 2, 3)
        return (lambda x, g, b: proj(T.batch_norm(x, g, b, m.copy(), v.copy(), train), r)), [x, g, b]

    def relu(rng):
        x = away_from_zero(rng, (3, 4))
        r = rng.normal(size=x.shape)
        return (lambda x: proj(T.relu(x), r)), [x]

    def maxpool(rng):
        vals = (np.arange(32) - 15.5) * 0.1 + rng.uniform(-0.02, 0.02, 32)
        x = rng.permutation(vals).reshape(2, 1, 4, 4)
        r = rng.normal(size=(2, 1, 2, 2))
        return (lambda x: proj(T.max_pool2d(x, 2), r)), [x]

    def gap(rng):
        x, r = rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(2, 3))
        return (lambda x: proj(T.global_avg_pool(x), r)), [x]

    def linear(rng):
        x, w, b, r = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5), rng.normal(size=(3, 5))
        return (lambda x, w, b: proj(T.linear(x, w, b), r)), [x, w, b]

    def xent(rng):
        z, y = rng.normal(size=(4, 5)) * 2, rng.integers(0, 5, 4)
        return (lambda z: T.softmax_cross_entropy(z, y)), [z]

    def select(rng):
        x, idx = rng.normal(size=(2, 5, 2, 2)), np.sort(rng.choice(5, 3, replace=False))
        r = rng.normal(size=(2, 3, 2, 2))
        return (lambda x: proj(T.channel_select(x, idx), r)), [x]

    def elementwise(rng):
        a, b = away_from_zero(rng, (3, 3)), rng.normal(size=3)
        return (lambda a, b: T.tsum(T.tabs(T.mul(T.add(a, b), a) - b))), [a, b]

    return dict(conv2d=conv, batch_norm=bn, relu=relu, max_pool2d=maxpool, global_avg_pool=gap, linear=linear,
                softmax_cross_entropy=xent, channel_select=select, add_mul_abs_sum=elementwise)


def test_criterion_1_gradients():
    start = time.perf_counter()
    worst, failures = 0.0, []
    for name, make in _grad_cases().items():
        for seed in range(20):
            fn, arrays = make(np.random.default_rng(seed))
            for a, n in zip(analytic_grads(fn, arrays), numerical_grads(fn, arrays)):
                err = rel_error(a, n)
                worst = max(worst, err)
                if err >= 1e-3:
                    failures.append((name, seed, err))
    elapsed = time.perf_counter() - start
    record(1, not failures and elapsed < 60,
           f"9 ops x 20 instances, worst rel err {worst:.2e}, {elapsed:.1f}s, failures {failures[:3]}")


# ---------------------------------------------------------------- 2

def test_criterion_2_dependency_bound():
    start = time.perf_counter()
    held = total = 0
    for seed in range(100):
        g = random_graph(seed)
        x = np.random.default_rng(seed + 10_000).normal(size=(3,) + g.input_shape)
        reports = verify_dependency_bound(g, x)
        total += 1
        held += all(r.lhs <= r.rhs * (1 + 1e-4) for r in reports)
    elapsed = time.perf_counter() - start
    record(2, held == total and elapsed < 60, f"bound held in {held}/{total} random graphs, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3

def _random_scores(rng):
    out = {}
    for i in range(int(rng.integers(1, 5))):
        s = (rng.lognormal(0, 1.5, int(rng.integers(1, 9))) * 10 ** rng.uniform(-2, 1)).astype(np.float32)
        if len(s) > 2 and rng.random() < 0.5:
            s[1] = s[0]
        out[f"l{i}"] = s
    return out


def test_criterion_3_oracle_equivalence():
    bad = {"scores": 0, "local": 0, "global": 0, "sparsity": 0}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        g = random_graph(seed)
        table = compute_importance(g)
        for pair in g.pairs():
            expected = np.zeros(pair.channels)
            expected[pair.active] = slice_norms(pair.consumer.weight.data)
            expected *= np.abs(pair.bn.gamma.data.astype(np.float64))
            if np.abs(table[pair.name].score - expected).max() > 1e-6 * max(1.0, expected.max()):
                bad["scores"] += 1
        scores = _random_scores(rng)
        p = float(rng.uniform(0.01, 0.99))
        r = float(np.round(rng.uniform(0.05, 0.95), 2))
        t = ImportanceTable.from_scores(scores)
        bad["local"] += select_local(t, p).pruned != local_oracle(scores, np.float32(p))
        bad["global"] += select_global(t, r).pruned != global_oracle(scores, r)
        channels = {n: len(s) for n, s in scores.items()}
        pruned = {n: tuple(np.flatnonzero(rng.random(c) < 0.5)) for n, c in channels.items()}
        reading = model_sparsity(PrunePlan(pruned, channels))
        bad["sparsity"] += reading.value != sum(map(len, pruned.values())) / sum(channels.values())
    record(3, not any(bad.values()), f"mismatches over 100 instances each: {bad}")


# ---------------------------------------------------------------- 4

def test_criterion_4_pathological_example():
    scores = {"layer1": [0.10, 0.01, 0.03, 0.15], "layer2": [1.0, 100.0, 2.0, 200.0]}
    table = ImportanceTable.from_scores(scores)
    glob = select_global(table, 0.5)
    ok_global = glob.collapsed == ("layer1",) and len(glob.pruned["layer1"]) == 3
    grid = np.linspace(0.2, 0.66, 48)[1:-1]
    ok_l1 = all(select_local(table, float(p)).pruned["layer1"] == (1, 2) for p in grid)
    # layer 2 keeps 100 only while 100 > 200 * p
    ok_l2 = all(select_local(table, float(p)).pruned["layer2"] == (0, 2) for p in grid if p < 0.5)
    ok_l2_rule = all(select_local(table, float(p)).pruned["layer2"] == local_oracle(scores, p)["layer2"]
                     for p in grid)
    record(4, ok_global and ok_l1 and ok_l2 and ok_l2_rule,
           f"global collapse flag {glob.collapsed}; local layer1 (1,2) on (0.2,0.66): {ok_l1}; "
           f"layer2 (0,2) on (0.2,0.5): {ok_l2}")


# ---------------------------------------------------------------- 5

def test_criterion_5_functional_exactness():
    worst, structural = 0.0, True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        g = random_graph(seed)
        pruned = {}
        for p in g.pairs():
            pool = p.active if p.is_feature_selection else np.arange(p.channels)
            drop = [int(c) for c in pool if rng.random() < 0.4][: len(pool) - 1]
            pruned[p.name] = tuple(drop) or (int(pool[0]),) if len(pool) > 1 else ()
        plan = PrunePlan(pruned, {p.name: p.channels for p in g.pairs()},
                         feature_selection=frozenset(p.name for p in g.pairs() if p.is_feature_selection))
        zeroed = zero_planned(g, plan)
        new, tr = prune_graph(zeroed, plan)
        x = Tensor(rng.normal(size=(100,) + g.input_shape))
        with no_grad():
            a, b = zeroed.eval()(x).data, new.eval()(x).data
        worst = max(worst, float(np.abs(a - b).max()))
        new.check_chain()
        structural &= b.shape == a.shape and tr.after[0] < tr.before[0] and tr.after[1] < tr.before[1]
    record(5, worst <= 1e-5 and structural,
           f"max |out diff| {worst:.2e} over 20 graphs x 100 inputs; shape chain and strict decrease {structural}")


# ---------------------------------------------------------------- 6

def test_criterion_6_controller():
    s = ControllerState(N=10, r=0.5)
    ex1 = DELTA_LAMBDA == 1e-5 and s.delta_lambda == 1e-5
    ex2 = controller_step(s, 0.0).lam == 1e-5
    ex3 = controller_step(s, 0.6).lam == 0.0
    plants = [Plant(k, 0.95, a) for k in (1e-4, 2e-4, 3e-4, 4e-4, 5e-4) for a in (1.0, 0.3)]
    worst_gap, nonneg, steps_ok = 0.0, True, True
    for plant in plants:
        for r in (0.3, 0.5, 0.7):
            st = run_closed_loop(plant, N=160, r=r)
            worst_gap = max(worst_gap, abs(st.P_prev - r))
            lams = np.array([0.0] + [h.lam for h in st.history])
            nonneg &= bool(lams.min() >= 0)
            steps_ok &= bool(np.abs(np.diff(lams)).max() <= DELTA_LAMBDA * (1 + 1e-9))
    record(6, ex1 and ex2 and ex3 and worst_gap <= 0.05 and nonneg and steps_ok,
           f"examples {ex1, ex2, ex3}; 10 plants x r in (0.3, 0.5, 0.7): worst |P_N - r| {worst_gap:.4f}, "
           f"lambda >= 0 {nonneg}, |step| <= delta {steps_ok}")


# ---------------------------------------------------------------- 7 to 9: desk-scale arms

@pytest.fixture(scope="module")
def desk_runs():
    out = {}
    for seed in SEEDS:
        cfg = resolve_config(str(DESK), {"seed": seed, "r": 0.5})
        splits = load_splits(cfg)
        budget = cfg.epochs_stage1 + cfg.epochs_stage3
        ours = run_pipeline(cfg, splits)
        baseline = run_pipeline(dataclasses.replace(cfg, rule="global", importance="gamma", constant_lambda=True,
                                                    fixed_lambda=cfg.delta_lambda), splits)
        _, control = train_control(cfg, budget, splits)
        scratch, _ = finetune_stage3(ours.pruned.clone(), dataclasses.replace(cfg, scratch=True), splits,
                                     epochs=budget)
        out[seed] = dict(ours=ours, baseline=baseline, control=control, scratch=evaluate(scratch, splits["test"]))
    return out


@pytest.mark.slow
def test_criterion_7_desk_end_to_end(desk_runs):
    P = {s: desk_runs[s]["ours"].final_sparsity for s in SEEDS}
    ok_a = all(0.45 <= p <= 0.60 for p in P.values())
    ours = {s: desk_runs[s]["ours"].acc_after_prune for s in SEEDS}
    base = {s: desk_runs[s]["baseline"].acc_after_prune for s in SEEDS}
    wins = sum(ours[s] > base[s] for s in SEEDS)
    gaps = {s: 100 * (desk_runs[s]["control"] - desk_runs[s]["ours"].acc_after_finetune) for s in SEEDS}
    ok_c = all(g <= 2.0 for g in gaps.values())

    def fmt(d):
        return ", ".join(f"{v:.3f}" for v in d.values())

    record(7, ok_a and wins >= 2 and ok_c,
           f"(a) P_N [{fmt(P)}]; (b) before-finetune ours [{fmt(ours)}] vs global [{fmt(base)}], wins {wins}/3; "
           f"(c) control minus finetuned [{fmt(gaps)}] points")


@pytest.mark.slow
def test_criterion_8_stability():
    sim_global, sim_local, sim_raw = [], [], []
    for seed in range(5):
        table = synthetic_importance(seed)
        g = select_global(table, 0.7)
        sim_global.append(raw_min_surviving(g))
        loc = select_local(table, p_for_ratio(table, 0.7))
        sim_local.append(loc.min_surviving())
        sim_raw.append(raw_min_surviving(loc))
    trained = []
    for seed in range(1, 6):
        cfg = resolve_config(str(DESK), {"seed": seed, "r": 0.7})
        splits = load_splits(cfg)
        graph, _, _ = train_stage1_sparsity(build_model(cfg, splits["train"].shape), cfg, splits)
        _, plan, _, _ = prune_stage(graph, cfg)
        trained.append(min((plan.channels[n] - len(plan.pruned[n])) / plan.channels[n] for n in plan.channels
                           if n not in plan.feature_selection))
    ok = min(sim_global) == 0 and min(sim_local) >= 1 and min(trained) >= 0.1
    record(8, ok, f"simulator min survivors global {sim_global}, local {sim_local} (pre-guard {sim_raw}); "
                  f"trained local min kept fraction {[round(t, 3) for t in trained]}")


@pytest.mark.slow
def test_criterion_9_scratch(desk_runs):
    gaps = {s: 100 * abs(desk_runs[s]["scratch"] - desk_runs[s]["ours"].acc_after_finetune) for s in SEEDS}
    record(9, all(g <= 2.0 for g in gaps.values()),
           "scratch vs finetuned |gap| points " + ", ".join(f"seed {s}: {g:.2f}" for s, g in gaps.items()))


# ---------------------------------------------------------------- 10

def test_criterion_10_formats(tmp_path):
    checks = {}
    g = random_graph(3)
    h = loads(dumps(g))
    checks["checkpoint"] = all(g.named_parameters()[k].data.tobytes() == v.data.tobytes()
                               for k, v in h.named_parameters().items()) and \
        all(g.named_buffers()[k].tobytes() == v.tobytes() for k, v in h.named_buffers().items())
    planes = np.zeros((3, 32, 32), np.uint8)
    planes[0, 0, 1], planes[1, 5, 5], planes[2, 31, 31] = 11, 22, 33
    x, y = parse_cifar_batch(bytes([6]) + planes.tobytes())
    checks["cifar"] = x.shape == (1, 3, 32, 32) and y.tolist() == [6] and \
        (x[0, 0, 0, 1], x[0, 1, 5, 5], x[0, 2, 31, 31]) == (11, 22, 33)
    idx = bytes.fromhex("00000803") + struct.pack(">III", 2, 2, 3) + bytes(range(12))
    arr = parse_idx(idx)
    checks["idx"] = bool(arr.shape == (2, 2, 3) and arr[1, 1, 2] == 11)
    run = tmp_path / "run"
    code = main(["run-all", "--config", str(DESK), "--set", "epochs_stage1=1", "--set", "epochs_stage3=1",
                 "--out", str(run)])
    report = tmp_path / "report"
    code2 = main(["report", "--compare", str(run), "--out", str(report)])
    headers = {}
    for name, header in SCHEMAS.items():
        path = run / name if (run / name).exists() else report / name
        headers[name] = path.read_text().split("\n")[0].split(",") == header
    checks["csv"] = code == 0 and code2 == 0 and all(headers.values())
    record(10, all(checks.values()), f"{checks}")
