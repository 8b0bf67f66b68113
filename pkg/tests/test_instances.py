import json

import numpy as np
import pytest

from rearrange.instances import (
    GeneratorConfig, InstanceFormatError, UnsupportedVersion, counts_stats, dataset_stats,
    generate_dataset, generate_pair, generate_room, instance_from_dict, instance_to_dict,
    load_instance, load_split, object_count_weights, random_walk_init, replay_plan,
    save_instance, split_seeds,
)
from rearrange.scene import (
    REWARD_ARRIVAL, REWARD_DISTANCE, REWARD_SUCCESS, is_success, layout_problem, total_distance,
)


def test_same_seed_same_pair():
    cfg = GeneratorConfig.desk()
    a = generate_pair(cfg, 42)
    b = generate_pair(cfg, 42)
    assert instance_to_dict(a[0], a[1]) == instance_to_dict(b[0], b[1])
    assert a[2] == b[2]


def test_different_seeds_differ():
    cfg = GeneratorConfig.desk()
    docs = {json.dumps(instance_to_dict(*generate_pair(cfg, s)[:2])) for s in range(10)}
    assert len(docs) == 10


def test_room_is_walled_and_targets_valid():
    cfg = GeneratorConfig.desk(pillars=2)
    inst = generate_room(cfg, 3)
    n = inst.grid_size
    for i in range(n):
        assert {(0, i), (n - 1, i), (i, 0), (i, n - 1)} <= inst.impassable
    assert layout_problem(inst, inst.target_state().poses) is None
    assert all(t.bin == 0 for t in inst.target)
    assert 2 <= inst.num_objects <= 4


@pytest.mark.parametrize("seed", range(20))
def test_certifying_plan_solves_instance(seed):
    cfg = GeneratorConfig.desk(min_objects=1, walk_rounds=300)
    inst, initial, record = generate_pair(cfg, seed)
    assert len(record.actions) + record.skipped == 300
    end, rewards = replay_plan(inst, initial, record.certifying_plan())
    assert is_success(inst, end)
    if record.actions:
        assert rewards[-1] == REWARD_DISTANCE + REWARD_ARRIVAL + REWARD_SUCCESS


def test_zero_walk_rounds_gives_solved_layout():
    cfg = GeneratorConfig.desk(walk_rounds=0)
    inst, initial, record = generate_pair(cfg, 1)
    assert is_success(inst, initial) and record.actions == ()


def test_walk_skips_jammed_object():
    # a 6x1 bar filling a 1-wide corridor exactly cannot translate or turn
    from rearrange.scene import ObjectFootprint, Pose, SceneInstance
    n = 8
    walls = frozenset((r, c) for r in range(n) for c in range(n) if r != 3 or c in (0, n - 1))
    bar = ObjectFootprint(0, ((1, 3), (7, 3), (7, 4), (1, 4)))
    inst = SceneInstance(n, walls, (bar,), (Pose(3, 4, 0),))
    initial, record = random_walk_init(inst, 50, np.random.default_rng(0))
    assert record.skipped == 50 and record.actions == ()
    assert initial.poses == inst.target


def test_count_weights_hit_requested_mean():
    cfg = GeneratorConfig(min_objects=1, max_objects=20, count_mean=6.1)
    w = object_count_weights(cfg)
    assert abs(float(np.arange(1, 21) @ w) - 6.1) < 1e-6
    uniform = object_count_weights(GeneratorConfig(min_objects=2, max_objects=5))
    assert np.allclose(uniform, 0.25)


def test_sampled_object_counts_follow_mean():
    cfg = GeneratorConfig(grid_size=32, min_objects=1, max_objects=20, count_mean=6.1, max_side=2)
    w = object_count_weights(cfg)
    rng = np.random.default_rng(0)
    counts = 1 + rng.choice(len(w), size=1000, p=w)
    assert abs(counts_stats(list(counts)).mean - 6.1) < 0.5


def test_round_trip(tmp_path):
    cfg = GeneratorConfig.desk(l_shape_prob=1.0)
    inst, initial, _ = generate_pair(cfg, 5)
    save_instance(inst, initial, tmp_path / "a.json")
    inst2, initial2 = load_instance(tmp_path / "a.json")
    assert inst2 == inst and initial2 == initial
    assert total_distance(inst2, initial2) == total_distance(inst, initial)


def _doc():
    cfg = GeneratorConfig.desk()
    return instance_to_dict(*generate_pair(cfg, 9)[:2])


def test_unsupported_version():
    doc = _doc()
    doc["version"] = 2
    with pytest.raises(UnsupportedVersion):
        instance_from_dict(doc)


@pytest.mark.parametrize("mutate,where", [
    (lambda d: d["objects"][1].pop("target"), "$.objects[1]"),
    (lambda d: d["objects"][0]["initial"].update(bin=24), "$.objects[0].initial.bin"),
    (lambda d: d["objects"][0]["initial"].update(row="3"), "$.objects[0].initial.row"),
    (lambda d: d.pop("grid_size"), "grid_size"),
    (lambda d: d["objects"][0].update(polygon=[[0, 0], [1, 1], [2, 2]]), "$.objects[0].polygon"),
    (lambda d: d.update(orientation_bins=8), "orientation_bins"),
])
def test_malformed_fields_are_named(mutate, where):
    doc = _doc()
    mutate(doc)
    with pytest.raises(InstanceFormatError, match=__import__("re").escape(where)):
        instance_from_dict(doc)


def test_overlapping_initial_layout_rejected():
    doc = _doc()
    doc["objects"][1]["initial"] = dict(doc["objects"][0]["initial"])
    with pytest.raises(InstanceFormatError, match="initial layout"):
        instance_from_dict(doc)


def test_bad_json_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "version": 1,\n  "grid_size": ,\n}')
    with pytest.raises(InstanceFormatError, match="line 3 column"):
        load_instance(p)


def test_split_is_deterministic_and_five_percent():
    train, test = split_seeds(list(range(1000)))
    assert len(test) == 50 and len(train) == 950
    assert set(train).isdisjoint(test)
    assert split_seeds(list(range(1000))) == (train, test)


def test_generate_dataset_layout(tmp_path):
    cfg = GeneratorConfig.desk(walk_rounds=50)
    tr, te = generate_dataset(cfg, 40, tmp_path)
    assert len(tr) == 38 and len(te) == 2
    assert len(load_split(tmp_path, "train")) == 38
    st = dataset_stats(tr + te)
    assert st.count == 40 and sum(st.histogram.values()) == 40
    assert set(st.histogram) <= {2, 3, 4}
