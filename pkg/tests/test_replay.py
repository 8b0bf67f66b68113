import threading

import numpy as np
import pytest
from scipy.stats import chisquare

from rearrange.replay import PrioritizedReplay, ReplayConfig, ReplayNotReady


def draw(buf, n, rng):
    """``n`` draws in batches no larger than the buffer (sampling requires size >= batch)."""
    items, ids, weights = [], [], []
    while len(items) < n:
        it, i, w = buf.sample(min(len(buf), n - len(items)), rng)
        items += it
        ids.append(i)
        weights.append(w)
    return items, np.concatenate(ids), np.concatenate(weights)


def test_fifo_eviction():
    buf = PrioritizedReplay(ReplayConfig(capacity=2))
    for x in "abc":
        buf.push(x)
    assert buf.items() == ["b", "c"] and len(buf) == 2


def test_zero_error_priority_floor():
    buf = PrioritizedReplay(ReplayConfig(capacity=4))
    buf.push("x", 0.0)
    assert buf.priority_of(0.0) == pytest.approx(1e-3 ** 0.6)
    items, ids, w = draw(buf, 3, np.random.default_rng(0))
    assert items == ["x"] * 3 and list(ids) == [0, 0, 0]


def test_priority_hand_value():
    assert PrioritizedReplay().priority_of(1.0) == pytest.approx(1.001 ** 0.6)
    assert PrioritizedReplay().priority_of(-1.0) == pytest.approx(1.0006, abs=1e-4)


def test_not_ready():
    buf = PrioritizedReplay(ReplayConfig(capacity=10))
    buf.push(1)
    with pytest.raises(ReplayNotReady):
        buf.sample(2, np.random.default_rng(0))


def test_one_to_three_frequencies():
    buf = PrioritizedReplay(ReplayConfig(capacity=2))
    buf.push("a", priority=1.0)
    buf.push("b", priority=3.0)
    n = 100_000
    items, _, _ = draw(buf, n, np.random.default_rng(1))
    freq = items.count("a") / n
    sigma = np.sqrt(0.25 * 0.75 / n)
    assert abs(freq - 0.25) < 3 * sigma


def test_chi_square_matches_priorities():
    rng = np.random.default_rng(2)
    buf = PrioritizedReplay(ReplayConfig(capacity=50))
    prio = rng.uniform(0.1, 5.0, 50)
    for i, p in enumerate(prio):
        buf.push(i, priority=p)
    items, _, _ = draw(buf, 100_000, np.random.default_rng(3))
    counts = np.bincount(items, minlength=50)
    expected = prio / prio.sum() * 100_000
    assert chisquare(counts, expected).pvalue > 0.01


def test_updated_priorities_reflected():
    buf = PrioritizedReplay(ReplayConfig(capacity=3, alpha=1.0, eps=1e-9))
    for x in range(3):
        buf.push(x, 1.0)
    assert buf.update_priorities([0, 2], [3.0, 0.0]) == 0
    n = 100_000
    items, _, _ = draw(buf, n, np.random.default_rng(4))
    p = np.array([3.0, 1.0, 1e-9]) / (4.0 + 1e-9)
    freq = np.bincount(items, minlength=3) / n
    assert np.all(np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / n) + 1e-9)


def test_equal_priorities_unit_weights():
    buf = PrioritizedReplay(ReplayConfig(capacity=5))
    for x in range(5):
        buf.push(x, 0.5)
    _, _, w = draw(buf, 20, np.random.default_rng(0))
    assert np.allclose(w, 1.0)


def test_beta_zero_gives_unit_weights():
    buf = PrioritizedReplay(ReplayConfig(capacity=5, beta=0.0, beta_final=0.0))
    for x in range(5):
        buf.push(x, priority=x + 1.0)
    _, _, w = draw(buf, 50, np.random.default_rng(0))
    assert np.all(w == 1.0)


def test_importance_weights_in_unit_interval():
    buf = PrioritizedReplay(ReplayConfig(capacity=20))
    rng = np.random.default_rng(5)
    for x in range(20):
        buf.push(x, rng.normal() * 10)
    _, _, w = draw(buf, 64, rng)
    assert np.all(w > 0) and np.all(w <= 1) and w.max() == 1.0


def test_sample_ids_are_insertion_ids_and_stale_ids_skipped():
    buf = PrioritizedReplay(ReplayConfig(capacity=3))
    for x in range(5):  # items 0 and 1 evicted
        buf.push(x)
    items, ids, _ = draw(buf, 200, np.random.default_rng(6))
    assert all(i == int(u) for i, u in zip(items, ids))
    assert buf.update_priorities([0, 1, 4, 99], [1.0] * 4) == 3
    assert buf.stale_updates == 3


def test_multi_producer_stress():
    cap = 500
    buf = PrioritizedReplay(ReplayConfig(capacity=cap))
    producers, per = 8, 400
    errors = []

    def produce(k):
        rng = np.random.default_rng(k)
        for i in range(per):
            buf.push((k, i), float(rng.normal()))
            if len(buf) > cap:
                errors.append("over capacity")

    def consume():
        rng = np.random.default_rng(99)
        for _ in range(200):
            if buf.ready(16):
                _, ids, _ = buf.sample(16, rng)
                buf.update_priorities(ids, rng.normal(size=16))

    threads = [threading.Thread(target=produce, args=(k,)) for k in range(producers)]
    threads.append(threading.Thread(target=consume))
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert buf.total_pushed == producers * per and len(buf) == cap
    live = buf.items()
    assert len(set(live)) == cap
    # per-producer order survives: each producer's surviving items are its latest, in order
    for k in range(producers):
        mine = [i for kk, i in live if kk == k]
        assert mine == sorted(mine) and (not mine or mine[-1] == per - 1)


def test_concurrent_pushes_all_present():
    buf = PrioritizedReplay(ReplayConfig(capacity=100))
    threads = [threading.Thread(target=buf.push, args=(k,)) for k in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(buf.items()) == list(range(10))


def test_beta_annealing():
    buf = PrioritizedReplay()
    buf.anneal_beta(0.5)
    assert buf.beta == pytest.approx(0.7)
    buf.anneal_beta(2.0)
    assert buf.beta == 1.0
