"""Grid rearrangement environment.

Objects live on an N x N occupancy grid. Each object has a fixed polygonal
silhouette, rasterized once per orientation bin; a pose is the anchor cell
(the cell holding the polygon centroid) plus an orientation bin. Actions
translate one object by a cell or rotate it by one 15 degree bin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

NUM_BINS = 24
BIN_DEGREES = 360.0 / NUM_BINS

UP, DOWN, LEFT, RIGHT, ROT_CW, ROT_CCW = range(6)
NUM_MOVES = 6
MOVE_NAMES = ("up", "down", "left", "right", "rot_cw", "rot_ccw")
INVERSE_MOVE = (DOWN, UP, RIGHT, LEFT, ROT_CCW, ROT_CW)

REWARD_DISTANCE = 1.0
REWARD_ARRIVAL = 4.0
REWARD_LEAVE = -4.0
REWARD_SUCCESS = 50.0

_TRANSLATIONS = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
_BIN_STEP = {ROT_CW: 1, ROT_CCW: -1}
# probe nudge so that cell centres lying exactly on an edge resolve consistently
_PROBE_NUDGE = (-1e-7, 1e-7)

WALL = 255


class SceneError(Exception):
    """Base class for environment errors."""


class InvalidFootprint(SceneError, ValueError):
    pass


class InvalidAction(SceneError, ValueError):
    pass


class InfeasibleAction(SceneError):
    pass


class InvalidScene(SceneError, ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    row: int
    col: int
    bin: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.row, self.col, self.bin)


@dataclass(frozen=True)
class Action:
    object_index: int
    move: int

    @property
    def flat_index(self) -> int:
        return self.object_index * NUM_MOVES + self.move

    @classmethod
    def from_flat(cls, index: int) -> "Action":
        return cls(int(index) // NUM_MOVES, int(index) % NUM_MOVES)

    def inverse(self) -> "Action":
        return Action(self.object_index, INVERSE_MOVE[self.move])

    def __str__(self) -> str:
        name = MOVE_NAMES[self.move] if 0 <= self.move < NUM_MOVES else f"move{self.move}"
        return f"{self.object_index}:{name}"


def polygon_area_centroid(polygon: Sequence[Sequence[float]]) -> tuple[float, float, float]:
    """Signed area and centroid (x, y) by the shoelace formula."""
    pts = [(float(x), float(y)) for x, y in polygon]
    if len(pts) < 3:
        raise InvalidFootprint("polygon needs at least 3 vertices")
    a = cx = cy = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
        cross = x0 * y1 - x1 * y0
        a += cross
        cx += (x0 + x1) * cross
        cy += (y0 + y1) * cross
    a *= 0.5
    if abs(a) < 1e-12:
        raise InvalidFootprint("polygon has zero area")
    return a, cx / (6.0 * a), cy / (6.0 * a)


def _point_in_polygon(x: float, y: float, pts: Sequence[tuple[float, float]]) -> bool:
    inside = False
    n = len(pts)
    j = n - 1
    for i in range(n):
        xi, yi = pts[i]
        xj, yj = pts[j]
        if (yi > y) != (yj > y):
            x_cross = xi + (y - yi) * (xj - xi) / (yj - yi)
            if x < x_cross:
                inside = not inside
        j = i
    return inside


def rasterize_footprint(polygon: Sequence[Sequence[float]], bin: int,
                        grid_size: int | None = None) -> tuple[tuple[int, int], ...]:
    """Cell offsets covered by ``polygon`` rotated ``bin`` steps clockwise.

    Coordinates are (x, y) = (column, row) in grid units with row 0 at the
    top, so a clockwise rotation on screen is a positive angle here. A cell is
    covered iff its centre lies inside the rotated polygon. Offsets are
    (drow, dcol) relative to the cell containing the centroid; that cell is
    used alone if no centre is covered.
    """
    _, cx, cy = polygon_area_centroid(polygon)
    theta = math.radians((bin % NUM_BINS) * BIN_DEGREES)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    pts = []
    for x, y in polygon:
        u, v = float(x) - cx, float(y) - cy
        pts.append((cx + u * cos_t - v * sin_t, cy + u * sin_t + v * cos_t))

    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    c0, c1 = math.floor(min(xs)) - 1, math.ceil(max(xs)) + 1
    r0, r1 = math.floor(min(ys)) - 1, math.ceil(max(ys)) + 1
    arow, acol = math.floor(cy), math.floor(cx)
    nx, ny = _PROBE_NUDGE
    cells = []
    for r in range(r0, r1 + 1):
        for c in range(c0, c1 + 1):
            if _point_in_polygon(c + 0.5 + nx, r + 0.5 + ny, pts):
                cells.append((r - arow, c - acol))
    if not cells:
        cells.append((0, 0))
    if grid_size is not None:
        rows = [dr for dr, _ in cells]
        cols = [dc for _, dc in cells]
        if max(rows) - min(rows) >= grid_size or max(cols) - min(cols) >= grid_size:
            raise InvalidFootprint("footprint does not fit inside the grid")
    return tuple(sorted(cells))


@dataclass(frozen=True)
class ObjectFootprint:
    id: int
    polygon: tuple[tuple[float, float], ...]
    masks: tuple[tuple[tuple[int, int], ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        poly = tuple((float(x), float(y)) for x, y in self.polygon)
        object.__setattr__(self, "polygon", poly)
        object.__setattr__(self, "masks",
                           tuple(rasterize_footprint(poly, b) for b in range(NUM_BINS)))

    @cached_property
    def frontiers(self) -> tuple[tuple[tuple[tuple[int, int], ...], ...], ...]:
        """Per bin and move: cells newly covered by the move, relative to the old anchor.

        Every other cell of the moved mask is already covered by the object,
        so these are the only cells a feasibility check has to inspect.
        """
        out = []
        for b in range(NUM_BINS):
            own = set(self.masks[b])
            per_move = []
            for move in range(NUM_MOVES):
                if move in _TRANSLATIONS:
                    dr, dc = _TRANSLATIONS[move]
                    moved = {(r + dr, c + dc) for r, c in self.masks[b]}
                else:
                    moved = set(self.masks[(b + _BIN_STEP[move]) % NUM_BINS])
                per_move.append(tuple(sorted(moved - own)))
            out.append(tuple(per_move))
        return tuple(out)

    def cells(self, pose: Pose) -> list[tuple[int, int]]:
        return [(pose.row + dr, pose.col + dc) for dr, dc in self.masks[pose.bin]]


def moved_pose(pose: Pose, move: int) -> Pose:
    if move in _TRANSLATIONS:
        dr, dc = _TRANSLATIONS[move]
        return Pose(pose.row + dr, pose.col + dc, pose.bin)
    return Pose(pose.row, pose.col, (pose.bin + _BIN_STEP[move]) % NUM_BINS)


def pose_distance(p: Pose, t: Pose) -> int:
    db = abs(p.bin - t.bin) % NUM_BINS
    return abs(p.row - t.row) + abs(p.col - t.col) + min(db, NUM_BINS - db)


@dataclass(frozen=True)
class LayoutState:
    poses: tuple[Pose, ...]
    step_count: int = 0

    def with_pose(self, index: int, pose: Pose) -> "LayoutState":
        poses = list(self.poses)
        poses[index] = pose
        return LayoutState(tuple(poses), self.step_count + 1)


@dataclass(frozen=True)
class StepOutcome:
    next: LayoutState
    reward: float
    done: bool
    success: bool


@dataclass(frozen=True)
class SceneInstance:
    grid_size: int
    impassable: frozenset[tuple[int, int]]
    objects: tuple[ObjectFootprint, ...]
    target: tuple[Pose, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "impassable",
                           frozenset((int(r), int(c)) for r, c in self.impassable))
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "target", tuple(self.target))
        if not self.objects:
            raise InvalidScene("a scene needs at least one object")
        if len(self.target) != len(self.objects):
            raise InvalidScene("one target pose per object is required")
        n = self.grid_size
        for r, c in self.impassable:
            if not (0 <= r < n and 0 <= c < n):
                raise InvalidScene(f"impassable cell {(r, c)} outside the grid")
        problem = layout_problem(self, self.target)
        if problem:
            raise InvalidScene(f"target layout invalid: {problem}")

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @cached_property
    def wall_grid(self) -> bytearray:
        grid = bytearray(self.grid_size * self.grid_size)
        for r, c in self.impassable:
            grid[r * self.grid_size + c] = WALL
        return grid

    def target_state(self) -> LayoutState:
        return LayoutState(self.target, 0)


def layout_problem(inst: SceneInstance, poses: Sequence[Pose]) -> str | None:
    """Describe why ``poses`` is not a valid layout, or None if it is."""
    n = inst.grid_size
    if len(poses) != len(inst.objects):
        return "pose count does not match object count"
    seen: dict[tuple[int, int], int] = {}
    for k, (obj, pose) in enumerate(zip(inst.objects, poses)):
        if not (0 <= pose.bin < NUM_BINS):
            return f"object {k}: orientation bin {pose.bin} out of range"
        if not (0 <= pose.row < n and 0 <= pose.col < n):
            return f"object {k}: anchor {(pose.row, pose.col)} out of bounds"
        for cell in obj.cells(pose):
            r, c = cell
            if not (0 <= r < n and 0 <= c < n):
                return f"object {k}: cell {cell} out of bounds"
            if cell in inst.impassable:
                return f"object {k}: cell {cell} is impassable"
            if cell in seen:
                return f"objects {seen[cell]} and {k} overlap at {cell}"
            seen[cell] = k
    return None


def occupancy(inst: SceneInstance, s: LayoutState) -> bytearray:
    """Flat grid: 0 free, WALL impassable, k + 1 for object k."""
    n = inst.grid_size
    grid = bytearray(inst.wall_grid)
    for k, (obj, pose) in enumerate(zip(inst.objects, s.poses)):
        for dr, dc in obj.masks[pose.bin]:
            grid[(pose.row + dr) * n + pose.col + dc] = k + 1
    return grid


def _move_ok(inst: SceneInstance, grid: bytearray, k: int, pose: Pose, move: int) -> bool:
    n = inst.grid_size
    new = moved_pose(pose, move)
    if not (0 <= new.row < n and 0 <= new.col < n):
        return False
    r0, c0 = pose.row, pose.col
    for dr, dc in inst.objects[k].frontiers[pose.bin][move]:
        r, c = r0 + dr, c0 + dc
        if r < 0 or c < 0 or r >= n or c >= n or grid[r * n + c]:
            return False
    return True


def feasible_list(inst: SceneInstance, s: LayoutState, grid: bytearray | None = None) -> list[bool]:
    if grid is None:
        grid = occupancy(inst, s)
    return [_move_ok(inst, grid, k, pose, m)
            for k, pose in enumerate(s.poses) for m in range(NUM_MOVES)]


def feasible_actions(inst: SceneInstance, s: LayoutState) -> np.ndarray:
    """Boolean mask of length 6K, True where the action keeps the layout valid."""
    return np.array(feasible_list(inst, s), dtype=bool)


def object_feasible_moves(inst: SceneInstance, s: LayoutState, k: int,
                          grid: bytearray | None = None) -> list[int]:
    if grid is None:
        grid = occupancy(inst, s)
    return [m for m in range(NUM_MOVES) if _move_ok(inst, grid, k, s.poses[k], m)]


def total_distance(inst: SceneInstance, s: LayoutState) -> int:
    return sum(pose_distance(p, t) for p, t in zip(s.poses, inst.target))


def is_success(inst: SceneInstance, s: LayoutState) -> bool:
    return all(p == t for p, t in zip(s.poses, inst.target))


def transition(inst: SceneInstance, s: LayoutState, a: Action,
               step_limit: int | None = None) -> StepOutcome:
    """Apply an action already known to be feasible."""
    k = a.object_index
    pose = s.poses[k]
    target = inst.target[k]
    new = moved_pose(pose, a.move)
    before = pose_distance(pose, target)
    after = pose_distance(new, target)
    nxt = s.with_pose(k, new)
    reward = REWARD_DISTANCE if after < before else -REWARD_DISTANCE
    if after == 0:
        reward += REWARD_ARRIVAL
    elif before == 0:
        reward += REWARD_LEAVE
    success = after == 0 and is_success(inst, nxt)
    if success:
        reward += REWARD_SUCCESS
    done = success or (step_limit is not None and nxt.step_count >= step_limit)
    return StepOutcome(nxt, reward, done, success)


def apply_action(inst: SceneInstance, s: LayoutState, a: Action,
                 step_limit: int | None = None) -> StepOutcome:
    """Validated transition; raises on out-of-range or infeasible actions."""
    if not (0 <= a.object_index < inst.num_objects) or not (0 <= a.move < NUM_MOVES):
        raise InvalidAction(f"action {a} out of range for {inst.num_objects} objects")
    grid = occupancy(inst, s)
    if not _move_ok(inst, grid, a.object_index, s.poses[a.object_index], a.move):
        raise InfeasibleAction(f"action {a} is infeasible")
    return transition(inst, s, a, step_limit)


def object_planes(inst: SceneInstance, poses: Iterable[Pose]) -> np.ndarray:
    n = inst.grid_size
    poses = list(poses)
    planes = np.zeros((len(poses), n, n), dtype=np.uint8)
    for k, (obj, pose) in enumerate(zip(inst.objects, poses)):
        for r, c in obj.cells(pose):
            planes[k, r, c] = 1
    return planes


@dataclass(frozen=True)
class _StaticPlanes:
    impassable: np.ndarray
    target: np.ndarray


def _static_planes(inst: SceneInstance) -> _StaticPlanes:
    cached = inst.__dict__.get("_static_planes")
    if cached is None:
        n = inst.grid_size
        wall = np.zeros((n, n), dtype=np.uint8)
        for r, c in inst.impassable:
            wall[r, c] = 1
        cached = _StaticPlanes(wall, object_planes(inst, inst.target))
        inst.__dict__["_static_planes"] = cached
    return cached


def build_state_tensor(inst: SceneInstance, s: LayoutState) -> np.ndarray:
    """Binary N x N x (2K + 1): current objects, impassable, target objects."""
    static = _static_planes(inst)
    planes = np.concatenate([object_planes(inst, s.poses), static.impassable[None], static.target])
    return np.ascontiguousarray(planes.transpose(1, 2, 0))


def state_planes(inst: SceneInstance, s: LayoutState, k_max: int) -> np.ndarray:
    """Channel-first network input of 2 * k_max + 1 planes; absent objects stay zero."""
    k = inst.num_objects
    if k > k_max:
        raise InvalidScene(f"{k} objects exceed the network capacity of {k_max}")
    n = inst.grid_size
    static = _static_planes(inst)
    out = np.zeros((2 * k_max + 1, n, n), dtype=np.uint8)
    for i, (obj, pose) in enumerate(zip(inst.objects, s.poses)):
        for dr, dc in obj.masks[pose.bin]:
            out[i, pose.row + dr, pose.col + dc] = 1
    out[k_max] = static.impassable
    out[k_max + 1:k_max + 1 + k] = static.target
    return out


def padded_mask(mask: Sequence[bool], k_max: int) -> np.ndarray:
    out = np.zeros(NUM_MOVES * k_max, dtype=bool)
    out[:len(mask)] = mask
    return out
