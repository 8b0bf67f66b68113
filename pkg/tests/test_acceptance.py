"""Acceptance criteria, one test each; the verdict lines are collected in the run summary."""
import json
import threading
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import ACCEPTANCE
from desk_ordering import judge, run_ordering
from oracles import circ, gradient_check_suite, optimality_suite
from rearrange.evaluation import EvalReport, EvalRow
from rearrange.instances import GeneratorConfig, generate_pair
from rearrange.replay import PrioritizedReplay, ReplayConfig
from rearrange.scene import apply_action, is_success
from rearrange.trainer import checkpoint_select, train

RESULTS = Path(__file__).resolve().parent.parent / "results"


def verdict(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


def _pose_dist(p, t):
    return abs(p.row - t.row) + abs(p.col - t.col) + circ(p.bin, t.bin)


def test_criterion_1_environment_oracle():
    started = time.process_time()
    cfg = GeneratorConfig(grid_size=16, min_objects=1, max_objects=4, max_side=3)
    solved = telescoped = 0
    n = 1000
    for seed in range(n):
        inst, initial, record = generate_pair(cfg, seed)
        s = initial
        dist_terms, last = [], 0.0
        for a in record.certifying_plan():
            k = a.object_index
            out = apply_action(inst, s, a)
            before = [_pose_dist(p, t) == 0 for p, t in zip(s.poses, inst.target)]
            after = [_pose_dist(p, t) == 0 for p, t in zip(out.next.poses, inst.target)]
            bonus = 4.0 * (after[k] and not before[k]) - 4.0 * (before[k] and not after[k])
            bonus += 50.0 * all(after)
            dist_terms.append(out.reward - bonus)
            last = out.reward
            s = out.next
        if is_success(inst, s) and (not record.actions or last >= 50):
            solved += 1
        total0 = sum(_pose_dist(p, t) for p, t in zip(initial.poses, inst.target))
        if all(abs(d) == 1.0 for d in dist_terms) and sum(dist_terms) == total0:
            telescoped += 1
    cpu = time.process_time() - started
    ok = solved == n and telescoped == n and cpu < 120
    verdict(1, ok, f"replay solved {solved}/{n}, telescoping exact {telescoped}/{n}, {cpu:.0f}s CPU")
    assert ok


def test_criterion_2_search_optimality():
    started = time.process_time()
    optimal, total, failures = optimality_suite(n=8, max_dist=4, rounds=50)
    cpu = time.process_time() - started
    frac = optimal / total
    ok = frac >= 0.99 and cpu < 300
    verdict(2, ok, f"BFS-optimal plans {optimal}/{total} = {frac:.4f} (need >= 0.99), {cpu:.0f}s CPU")
    assert ok, failures[:10]


def test_criterion_3_gradient_checks():
    started = time.process_time()
    worst, flips = gradient_check_suite(range(20))
    cpu = time.process_time() - started
    ok = max(worst.values()) < 1e-4 and flips == 0 and cpu < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(3, ok, f"max relative error over 20 seeds: {detail}; ReLU flips {flips}; {cpu:.0f}s CPU")
    assert ok


def test_criterion_4_replay_statistics():
    started = time.process_time()
    rng = np.random.default_rng(0)
    size = 64
    buf = PrioritizedReplay(ReplayConfig(capacity=size))
    errors = rng.normal(scale=3.0, size=size)
    for i, e in enumerate(errors):
        buf.push(i, float(e))
    draws = []
    sample_rng = np.random.default_rng(1)
    while len(draws) < 100_000:
        items, _, _ = buf.sample(size, sample_rng)
        draws += items
    counts = np.bincount(draws[:100_000], minlength=size)
    prio = np.array([buf.priority_of(e) for e in errors])
    p_value = chisquare(counts, prio / prio.sum() * 100_000).pvalue

    cap, producers, per = 1000, 8, 2000
    stress = PrioritizedReplay(ReplayConfig(capacity=cap))
    over = []

    def produce(k):
        r = np.random.default_rng(k)
        for i in range(per):
            stress.push((k, i), float(r.normal()))
            if len(stress) > cap:
                over.append(k)

    def consume():
        r = np.random.default_rng(100)
        for _ in range(300):
            if stress.ready(32):
                _, ids, _ = stress.sample(32, r)
                stress.update_priorities(ids, r.normal(size=32))

    threads = [threading.Thread(target=produce, args=(k,)) for k in range(producers)]
    threads.append(threading.Thread(target=consume))
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    live = stress.items()
    fifo = all([i for kk, i in live if kk == k] == list(range(per - sum(kk == k for kk, _ in live), per))
               for k in range(producers))
    bounded = not over and len(live) == cap and len(set(live)) == cap
    cpu = time.process_time() - started
    ok = p_value > 0.01 and fifo and bounded and cpu < 60
    verdict(4, ok, f"chi-square p = {p_value:.3f} over 1e5 draws; capacity held {bounded}; "
                   f"FIFO per producer {fifo}; {cpu:.0f}s CPU")
    assert ok


@pytest.mark.slow
def test_criterion_5_desk_ordering():
    started = time.process_time()
    result = run_ordering(log=lambda msg: None)
    cpu = time.process_time() - started
    result["cpu_seconds"] = round(cpu, 1)
    result["verdict"] = v = judge(result)
    RESULTS.mkdir(exist_ok=True)
    (RESULTS / "desk_ordering.json").write_text(json.dumps(result, indent=1) + "\n")
    m = result["modes"]
    ok = v["expert_ge_apprentice"] and v["apprentice_vs_rl"] and v["expert_assisted_faster"] and cpu < 3600
    verdict(5, ok, f"pearl expert SR {m['pearl']['expert_SR']:.2f} vs apprentice {m['pearl']['apprentice_SR']:.2f}; "
                   f"rl SR {m['rl']['apprentice_SR']:.2f}; episodes to half final train SR "
                   + ", ".join(f"{k} {m[k]['episodes_to_half']}" for k in ("rl", "exit", "pearl"))
                   + f"; {cpu / 60:.0f} min CPU")
    assert ok, v


def test_criterion_6_metrics_arithmetic():
    rows = [EvalRow(str(i), True, n, 0.0) for i, n in enumerate((20, 30, 40))]
    rows += [EvalRow(str(i), False, 57, 0.0) for i in range(3, 10)]
    rep = EvalReport(rows, 200)
    sel = [checkpoint_select([{"SR": s, "Length": 1.0} for s in (0.1, 0.3, 0.2)]),
           checkpoint_select([{"SR": 0.3, "Length": 150.0}, {"SR": 0.3, "Length": 120.0}]),
           checkpoint_select([{"SR": 0.3, "Length": 120.0}, {"SR": 0.3, "Length": 120.0}])]
    try:
        checkpoint_select([])
        empty_error = False
    except ValueError:
        empty_error = True
    ok = rep.sr == 0.3 and rep.length == 149.0 and sel == [1, 1, 0] and empty_error
    verdict(6, ok, f"SR {rep.sr}, Length {rep.length} (failures at the limit); selections {sel}, "
                   f"empty list rejected {empty_error}")
    assert ok


def test_criterion_7_determinism(tmp_path):
    from rearrange.network import ArchConfig
    from rearrange.search import SearchConfig
    from rearrange.trainer import RunConfig, TrainConfig
    cfg = GeneratorConfig.desk(min_objects=2, max_objects=2, walk_rounds=100)
    data = [(f"{i:05d}", *generate_pair(cfg, i)[:2]) for i in range(20)]
    same = []
    for mode in ("pearl", "exit", "rl"):
        rc = RunConfig(mode=mode, episodes=24, seed=11, arch=ArchConfig(grid_size=16, k_max=2),
                       search=SearchConfig(rounds=10), train=TrainConfig(batch=32, lr=1e-3),
                       train_step_limit=30)
        train(rc, data, tmp_path / mode / "a")
        train(rc, data, tmp_path / mode / "b")
        a = (tmp_path / mode / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / mode / "b" / "metrics.csv").read_bytes()
        same.append(a == b and a.count(b"\n") == 25)
    ok = all(same)
    verdict(7, ok, f"byte-identical metrics.csv across two serial runs (pearl, exit, rl): {same}")
    assert ok
