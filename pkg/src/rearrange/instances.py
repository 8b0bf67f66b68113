"""Procedural rooms, random-walk initial layouts and the instance file format."""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .scene import (
    NUM_BINS,
    Action,
    InvalidFootprint,
    InvalidScene,
    LayoutState,
    ObjectFootprint,
    Pose,
    SceneInstance,
    apply_action,
    layout_problem,
    object_feasible_moves,
    polygon_area_centroid,
    transition,
)

FORMAT_VERSION = 1
TEST_FRACTION = 0.05


class GenerationFailed(RuntimeError):
    pass


class InstanceFormatError(ValueError):
    pass


class UnsupportedVersion(InstanceFormatError):
    pass


@dataclass
class GeneratorConfig:
    grid_size: int = 64
    min_objects: int = 1
    max_objects: int = 20
    # when set, object counts follow a truncated Poisson with this mean
    count_mean: float | None = None
    min_side: int = 1
    max_side: int = 6
    l_shape_prob: float = 0.25
    pillars: int = 0
    walk_rounds: int = 1000
    seed: int = 0
    max_place_tries: int = 200
    max_room_tries: int = 20

    def validate(self) -> None:
        if self.grid_size < 8:
            raise ValueError("grid_size must be at least 8")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValueError("object count range must satisfy 1 <= min <= max")
        if not (1 <= self.min_side <= self.max_side):
            raise ValueError("side range must satisfy 1 <= min <= max")
        if self.walk_rounds < 0:
            raise ValueError("walk_rounds must be non-negative")

    @classmethod
    def desk(cls, **overrides) -> "GeneratorConfig":
        base = dict(grid_size=16, min_objects=2, max_objects=4, min_side=1, max_side=3)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class WalkRecord:
    actions: tuple[Action, ...]
    skipped: int = 0

    def certifying_plan(self) -> list[Action]:
        """Actions leading from the walk's end back to where it started."""
        return [a.inverse() for a in reversed(self.actions)]


def _poisson_weights(lam: float, lo: int, hi: int) -> np.ndarray:
    ks = np.arange(lo, hi + 1)
    logw = ks * math.log(lam) - lam - np.array([math.lgamma(k + 1) for k in ks])
    w = np.exp(logw - logw.max())
    return w / w.sum()


def object_count_weights(cfg: GeneratorConfig) -> np.ndarray:
    """Probabilities over K = min_objects..max_objects."""
    lo, hi = cfg.min_objects, cfg.max_objects
    if cfg.count_mean is None:
        return np.full(hi - lo + 1, 1.0 / (hi - lo + 1))
    if not (lo <= cfg.count_mean <= hi):
        raise ValueError("count_mean must lie inside the object count range")
    ks = np.arange(lo, hi + 1)
    a, b = 1e-6, 10.0 * hi
    for _ in range(200):
        mid = 0.5 * (a + b)
        if float(ks @ _poisson_weights(mid, lo, hi)) < cfg.count_mean:
            a = mid
        else:
            b = mid
    return _poisson_weights(0.5 * (a + b), lo, hi)


def _template_polygon(rng: np.random.Generator, cfg: GeneratorConfig) -> list[tuple[float, float]]:
    w = int(rng.integers(cfg.min_side, cfg.max_side + 1))
    h = int(rng.integers(cfg.min_side, cfg.max_side + 1))
    if w >= 2 and h >= 2 and rng.random() < cfg.l_shape_prob:
        cw = int(rng.integers(1, w))
        ch = int(rng.integers(1, h))
        return [(0, 0), (w, 0), (w, ch), (cw, ch), (cw, h), (0, h)]
    return [(0, 0), (w, 0), (w, h), (0, h)]


def _wall_cells(rng: np.random.Generator, cfg: GeneratorConfig) -> set[tuple[int, int]]:
    n = cfg.grid_size
    cells = {(r, c) for r in range(n) for c in range(n) if r in (0, n - 1) or c in (0, n - 1)}
    for _ in range(cfg.pillars):
        r, c = (int(v) for v in rng.integers(2, n - 3, size=2))
        cells |= {(r, c), (r + 1, c), (r, c + 1), (r + 1, c + 1)}
    return cells


def generate_room(cfg: GeneratorConfig, seed: int | None = None) -> SceneInstance:
    """Walled room with objects placed by rejection sampling at their target poses."""
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    n = cfg.grid_size
    weights = object_count_weights(cfg)
    k = cfg.min_objects + int(rng.choice(len(weights), p=weights))

    free_area = (n - 2) ** 2
    if k * cfg.min_side ** 2 > free_area:
        raise GenerationFailed(f"{k} objects of area >= {cfg.min_side ** 2} cannot fit in {free_area} free cells")

    for _ in range(cfg.max_room_tries):
        walls = _wall_cells(rng, cfg)
        taken = set(walls)
        objects, targets = [], []
        for obj_id in range(k):
            placed = False
            for _ in range(cfg.max_place_tries):
                base = _template_polygon(rng, cfg)
                w = max(x for x, _ in base)
                h = max(y for _, y in base)
                if w > n - 2 or h > n - 2:
                    continue
                x0 = int(rng.integers(1, n - 1 - w + 1))
                y0 = int(rng.integers(1, n - 1 - h + 1))
                fp = ObjectFootprint(obj_id, tuple((float(x + x0), float(y + y0)) for x, y in base))
                anchor = _anchor_cell(fp)
                cells = {(anchor[0] + dr, anchor[1] + dc) for dr, dc in fp.masks[0]}
                if any(not (0 <= r < n and 0 <= c < n) for r, c in cells) or cells & taken:
                    continue
                taken |= cells
                objects.append(fp)
                targets.append(Pose(anchor[0], anchor[1], 0))
                placed = True
                break
            if not placed:
                break
        else:
            return SceneInstance(n, frozenset(walls), tuple(objects), tuple(targets))
    raise GenerationFailed(f"could not place {k} objects after {cfg.max_room_tries} rooms")


def _anchor_cell(fp: ObjectFootprint) -> tuple[int, int]:
    _, cx, cy = polygon_area_centroid(fp.polygon)
    return math.floor(cy), math.floor(cx)


def random_walk_init(inst: SceneInstance, rounds: int,
                     rng: np.random.Generator) -> tuple[LayoutState, WalkRecord]:
    """Scramble the target layout with ``rounds`` random feasible single-object moves.

    A round whose chosen object cannot move is skipped and counted.
    """
    s = inst.target_state()
    k = inst.num_objects
    actions = []
    skipped = 0
    for _ in range(rounds):
        obj = int(rng.integers(k))
        moves = object_feasible_moves(inst, s, obj)
        if not moves:
            skipped += 1
            continue
        a = Action(obj, moves[int(rng.integers(len(moves)))])
        s = transition(inst, s, a).next
        actions.append(a)
    return LayoutState(s.poses, 0), WalkRecord(tuple(actions), skipped)


def replay_plan(inst: SceneInstance, start: LayoutState, plan: Sequence[Action]) -> tuple[LayoutState, list[float]]:
    s = start
    rewards = []
    for a in plan:
        out = apply_action(inst, s, a)
        rewards.append(out.reward)
        s = out.next
    return s, rewards


def generate_pair(cfg: GeneratorConfig, seed: int) -> tuple[SceneInstance, LayoutState, WalkRecord]:
    """Room plus scrambled initial layout; regenerates when half the walk rounds jam."""
    for attempt in range(cfg.max_room_tries):
        sub = seed if attempt == 0 else int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0])
        inst = generate_room(cfg, sub)
        initial, record = random_walk_init(inst, cfg.walk_rounds, np.random.default_rng([seed, attempt, 1]))
        if cfg.walk_rounds == 0 or record.skipped < 0.5 * cfg.walk_rounds:
            return inst, initial, record
    raise GenerationFailed(f"seed {seed}: random walks kept jamming")


# ---------------------------------------------------------------------------
# file format

def instance_to_dict(inst: SceneInstance, initial: LayoutState) -> dict:
    return {
        "version": FORMAT_VERSION,
        "grid_size": inst.grid_size,
        "orientation_bins": NUM_BINS,
        "impassable": [list(c) for c in sorted(inst.impassable)],
        "objects": [
            {
                "id": obj.id,
                "polygon": [list(p) for p in obj.polygon],
                "initial": {"row": p0.row, "col": p0.col, "bin": p0.bin},
                "target": {"row": t.row, "col": t.col, "bin": t.bin},
            }
            for obj, p0, t in zip(inst.objects, initial.poses, inst.target)
        ],
    }


def _field(d: dict, key: str, where: str, kind=None):
    if not isinstance(d, dict) or key not in d:
        raise InstanceFormatError(f"{where}: missing field '{key}'")
    value = d[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise InstanceFormatError(f"{where}.{key}: expected an integer, got {value!r}")
    if kind is list and not isinstance(value, list):
        raise InstanceFormatError(f"{where}.{key}: expected a list")
    return value


def _pose(d: dict, where: str) -> Pose:
    pose = Pose(_field(d, "row", where, int), _field(d, "col", where, int), _field(d, "bin", where, int))
    if not (0 <= pose.bin < NUM_BINS):
        raise InstanceFormatError(f"{where}.bin: {pose.bin} outside [0, {NUM_BINS})")
    return pose


def instance_from_dict(doc: dict) -> tuple[SceneInstance, LayoutState]:
    if not isinstance(doc, dict):
        raise InstanceFormatError("document root must be an object")
    version = _field(doc, "version", "$", int)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unsupported instance format version {version}")
    bins = _field(doc, "orientation_bins", "$", int)
    if bins != NUM_BINS:
        raise InstanceFormatError(f"$.orientation_bins: expected {NUM_BINS}, got {bins}")
    n = _field(doc, "grid_size", "$", int)
    walls = []
    for i, cell in enumerate(_field(doc, "impassable", "$", list)):
        if not (isinstance(cell, list) and len(cell) == 2 and all(isinstance(v, int) for v in cell)):
            raise InstanceFormatError(f"$.impassable[{i}]: expected [row, col]")
        walls.append(tuple(cell))
    objects, initial, target = [], [], []
    for i, od in enumerate(_field(doc, "objects", "$", list)):
        where = f"$.objects[{i}]"
        poly = _field(od, "polygon", where, list)
        try:
            fp = ObjectFootprint(_field(od, "id", where, int), tuple(tuple(p) for p in poly))
        except (InvalidFootprint, TypeError, ValueError) as exc:
            raise InstanceFormatError(f"{where}.polygon: {exc}") from exc
        objects.append(fp)
        initial.append(_pose(_field(od, "initial", where), f"{where}.initial"))
        target.append(_pose(_field(od, "target", where), f"{where}.target"))
    try:
        inst = SceneInstance(n, frozenset(walls), tuple(objects), tuple(target))
    except InvalidScene as exc:
        raise InstanceFormatError(str(exc)) from exc
    problem = layout_problem(inst, initial)
    if problem:
        raise InstanceFormatError(f"initial layout invalid: {problem}")
    return inst, LayoutState(tuple(initial), 0)


def save_instance(inst: SceneInstance, initial: LayoutState, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(instance_to_dict(inst, initial), indent=1) + "\n", encoding="utf-8")


def load_instance(path: str | Path) -> tuple[SceneInstance, LayoutState]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return instance_from_dict(doc)
    except InstanceFormatError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


@dataclass
class DatasetStats:
    histogram: dict[int, int] = field(default_factory=dict)
    mean: float = 0.0
    count: int = 0


def dataset_stats(paths: Iterable[str | Path]) -> DatasetStats:
    counts = [load_instance(p)[0].num_objects for p in paths]
    return counts_stats(counts)


def counts_stats(counts: Sequence[int]) -> DatasetStats:
    if not counts:
        return DatasetStats()
    return DatasetStats(dict(sorted(Counter(counts).items())), float(np.mean(counts)), len(counts))


def split_seeds(seeds: Sequence[int], test_fraction: float = TEST_FRACTION) -> tuple[list[int], list[int]]:
    """Deterministic train/test split: the seeds with the smallest hashes go to test."""
    n_test = int(round(len(seeds) * test_fraction))
    ranked = sorted(seeds, key=lambda s: hashlib.sha256(str(s).encode()).hexdigest())
    test = set(ranked[:n_test])
    return [s for s in seeds if s not in test], [s for s in seeds if s in test]


def generate_dataset(cfg: GeneratorConfig, rooms: int, out_dir: str | Path,
                     first_seed: int | None = None) -> tuple[list[Path], list[Path]]:
    """Write ``dataset/{train,test}/NNNNN.json``; returns the written paths."""
    out_dir = Path(out_dir)
    base = cfg.seed if first_seed is None else first_seed
    seeds = [base + i for i in range(rooms)]
    train, test = split_seeds(seeds)
    test_set = set(test)
    written: dict[str, list[Path]] = {"train": [], "test": []}
    for i, seed in enumerate(seeds):
        inst, initial, _ = generate_pair(cfg, seed)
        split = "test" if seed in test_set else "train"
        path = out_dir / split / f"{i:05d}.json"
        save_instance(inst, initial, path)
        written[split].append(path)
    return written["train"], written["test"]


def load_split(root: str | Path, split: str) -> list[tuple[str, SceneInstance, LayoutState]]:
    paths = sorted((Path(root) / split).glob("*.json"))
    return [(p.stem, *load_instance(p)) for p in paths]
