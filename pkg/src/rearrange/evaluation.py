"""Agents, success-rate / length evaluation, plan export and frame rendering."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .network import ArchConfig, ModelParams, NetworkEvaluator, UniformEvaluator
from .scene import (
    Action,
    InfeasibleAction,
    InvalidAction,
    LayoutState,
    SceneInstance,
    apply_action,
    feasible_list,
    is_success,
)
from .search import SearchConfig, SearchTree, run_search

TEST_STEP_LIMIT = 200


class EmptyEvaluation(ValueError):
    pass


class Agent(Protocol):
    def reset(self, inst: SceneInstance, initial: LayoutState) -> None: ...

    def act(self, inst: SceneInstance, s: LayoutState, mask: Sequence[bool]) -> Action: ...


class ApprenticeAgent:
    """Greedy network policy: argmax over feasible actions."""

    def __init__(self, params: ModelParams, arch: ArchConfig):
        self.evaluator = NetworkEvaluator(params, arch)

    def reset(self, inst, initial) -> None:
        pass

    def act(self, inst, s, mask) -> Action:
        probs, _ = self.evaluator(inst, s, mask)
        probs = np.where(np.asarray(mask, dtype=bool), probs, -1.0)
        return Action.from_flat(int(np.argmax(probs)))


class ExpertAgent:
    """Tree search guided by the network, or by uniform priors without one."""

    def __init__(self, params: ModelParams | None, arch: ArchConfig | None,
                 search: SearchConfig = SearchConfig()):
        self.evaluator = UniformEvaluator() if params is None else NetworkEvaluator(params, arch)
        self.search = search
        self._tree: SearchTree | None = None

    def reset(self, inst, initial) -> None:
        self._tree = None

    def act(self, inst, s, mask) -> Action:
        decision, tree = run_search(inst, s, self.evaluator, self.search, self._tree)
        a = decision.action
        self._tree = tree.advance(a.flat_index) if self.search.reuse_subtree else None
        return a


class RandomAgent:
    """Uniform over feasible actions, reseeded per episode for reproducibility."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self, inst, initial) -> None:
        key = [self.seed] + [v for p in initial.poses for v in p.as_tuple()]
        self.rng = np.random.default_rng(key)

    def act(self, inst, s, mask) -> Action:
        feasible = [i for i, ok in enumerate(mask) if ok]
        return Action.from_flat(feasible[int(self.rng.integers(len(feasible)))])


class ScriptedAgent:
    """Replays a fixed action list per instance (e.g. a certifying plan)."""

    def __init__(self, plans: dict[int, Sequence[Action]]):
        self.plans = plans
        self._queue: list[Action] = []

    def reset(self, inst, initial) -> None:
        self._queue = list(self.plans[id(inst)])

    def act(self, inst, s, mask) -> Action:
        return self._queue.pop(0)


AGENT_KINDS = ("apprentice", "expert", "random")


def make_agent(kind: str, params: ModelParams | None = None, arch: ArchConfig | None = None,
               search: SearchConfig = SearchConfig(), seed: int = 0) -> Agent:
    if kind == "apprentice":
        if params is None:
            raise ValueError("the apprentice agent needs network parameters")
        return ApprenticeAgent(params, arch)
    if kind == "expert":
        return ExpertAgent(params, arch, search)
    if kind == "random":
        return RandomAgent(seed)
    raise ValueError(f"unknown agent kind {kind!r}; expected one of {AGENT_KINDS}")


@dataclass
class PlanResult:
    actions: list[Action]
    success: bool
    length: int
    reward: float
    jammed: bool = False


def plan(agent: Agent, inst: SceneInstance, initial: LayoutState,
         step_limit: int = TEST_STEP_LIMIT) -> PlanResult:
    """Greedy rollout of ``agent`` from ``initial`` until success, jam or the step limit."""
    agent.reset(inst, initial)
    s = LayoutState(initial.poses, 0)
    actions: list[Action] = []
    total = 0.0
    success = is_success(inst, s)
    while not success and len(actions) < step_limit:
        mask = feasible_list(inst, s)
        if not any(mask):
            return PlanResult(actions, False, len(actions), total, jammed=True)
        a = agent.act(inst, s, mask)
        out = apply_action(inst, s, a)
        actions.append(a)
        total += out.reward
        success = out.success
        s = out.next
    return PlanResult(actions, success, len(actions), total)


@dataclass
class EvalRow:
    instance_id: str
    success: bool
    length: int
    reward_sum: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    step_limit: int = TEST_STEP_LIMIT
    sr: float = field(init=False)
    length: float = field(init=False)

    def __post_init__(self) -> None:
        self.sr, self.length = summarize(self.rows, self.step_limit)

    @property
    def instances(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["instance_id", "success", "length", "reward_sum"])
        for r in self.rows:
            w.writerow([r.instance_id, int(r.success), r.length, repr(float(r.reward_sum))])
        return buf.getvalue()


def summarize(rows: Sequence[EvalRow], step_limit: int) -> tuple[float, float]:
    """SR and mean length, failures counted at the step limit."""
    if not rows:
        raise EmptyEvaluation("nothing to evaluate")
    sr = sum(r.success for r in rows) / len(rows)
    length = sum(r.length if r.success else step_limit for r in rows) / len(rows)
    return sr, length


def evaluate(agent: Agent, instances: Sequence[tuple[str, SceneInstance, LayoutState]],
             step_limit: int = TEST_STEP_LIMIT) -> EvalReport:
    if not instances:
        raise EmptyEvaluation("nothing to evaluate")
    rows = []
    for iid, inst, initial in instances:
        res = plan(agent, inst, initial, step_limit)
        rows.append(EvalRow(iid, res.success, res.length, res.reward))
    return EvalReport(rows, step_limit)


# ---------------------------------------------------------------------------
# rendering

PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
)
BACKGROUND = (255, 255, 255)
IMPASSABLE = (40, 40, 40)


class RenderError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


def object_color(obj_id: int) -> tuple[int, int, int]:
    return PALETTE[obj_id % len(PALETTE)]


def render_frame(inst: SceneInstance, s: LayoutState, scale: int = 8) -> np.ndarray:
    """RGB image: impassable dark, objects filled, targets outlined (scale >= 3)."""
    n = inst.grid_size
    img = np.empty((n * scale, n * scale, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for r, c in inst.impassable:
        img[r * scale:(r + 1) * scale, c * scale:(c + 1) * scale] = IMPASSABLE
    for obj, pose in zip(inst.objects, s.poses):
        color = object_color(obj.id)
        for r, c in obj.cells(pose):
            img[r * scale:(r + 1) * scale, c * scale:(c + 1) * scale] = color
    if scale >= 3:
        for obj, pose in zip(inst.objects, inst.target):
            color = object_color(obj.id)
            cells = set(obj.cells(pose))
            for r, c in cells:
                y0, x0 = r * scale, c * scale
                if (r - 1, c) not in cells:
                    img[y0, x0:x0 + scale] = color
                if (r + 1, c) not in cells:
                    img[y0 + scale - 1, x0:x0 + scale] = color
                if (r, c - 1) not in cells:
                    img[y0:y0 + scale, x0] = color
                if (r, c + 1) not in cells:
                    img[y0:y0 + scale, x0 + scale - 1] = color
    return img


def frame_occupancy(img: np.ndarray, inst: SceneInstance, scale: int) -> dict[int, set[tuple[int, int]]]:
    """Recover each object's cells from the centre pixel of every cell."""
    n = inst.grid_size
    occ: dict[int, set[tuple[int, int]]] = {obj.id: set() for obj in inst.objects}
    lookup = {object_color(obj.id): obj.id for obj in inst.objects}
    half = scale // 2
    for r in range(n):
        for c in range(n):
            px = tuple(int(v) for v in img[r * scale + half, c * scale + half])
            if px in lookup:
                occ[lookup[px]].add((r, c))
    return occ


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM file")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def ascii_frame(inst: SceneInstance, s: LayoutState) -> str:
    """'#' impassable, letters for objects, lower case where only a target lies."""
    n = inst.grid_size
    grid = [["." for _ in range(n)] for _ in range(n)]
    for r, c in inst.impassable:
        grid[r][c] = "#"
    for k, (obj, pose) in enumerate(zip(inst.objects, inst.target)):
        for r, c in obj.cells(pose):
            grid[r][c] = chr(ord("a") + k % 26)
    for k, (obj, pose) in enumerate(zip(inst.objects, s.poses)):
        for r, c in obj.cells(pose):
            grid[r][c] = chr(ord("A") + k % 26)
    return "\n".join("".join(row) for row in grid)


def render(inst: SceneInstance, initial: LayoutState, actions: Sequence[Action],
           out_dir: str | Path | None = None, scale: int = 8, ascii: bool = False) -> list:
    """One frame per layout along the plan (len(actions) + 1 frames).

    Frames are written as ``frame_NNNN.ppm`` (or ``.txt`` in ascii mode) when
    ``out_dir`` is given; the frames are also returned.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    frames = []
    s = LayoutState(initial.poses, 0)

    def emit(i: int, state: LayoutState) -> None:
        frame = ascii_frame(inst, state) if ascii else render_frame(inst, state, scale)
        frames.append(frame)
        if out is not None:
            if ascii:
                (out / f"frame_{i:04d}.txt").write_text(frame + "\n")
            else:
                write_ppm(out / f"frame_{i:04d}.ppm", frame)

    emit(0, s)
    for i, a in enumerate(actions, start=1):
        try:
            s = apply_action(inst, s, a).next
        except (InfeasibleAction, InvalidAction) as exc:
            raise RenderError(i, str(exc)) from exc
        emit(i, s)
    return frames


def plan_to_dict(result: PlanResult) -> dict:
    return {
        "success": result.success,
        "length": result.length,
        "reward": result.reward,
        "jammed": result.jammed,
        "actions": [{"object": a.object_index, "move": a.move, "flat": a.flat_index} for a in result.actions],
    }


def actions_from_dict(doc: dict) -> list[Action]:
    return [Action(int(a["object"]), int(a["move"])) for a in doc["actions"]]
