from __future__ import annotations

import pytest

from rearrange.scene import LayoutState, ObjectFootprint, Pose, SceneInstance


def unit_square(row: int = 0, col: int = 0) -> tuple[tuple[float, float], ...]:
    return ((col, row), (col + 1, row), (col + 1, row + 1), (col, row + 1))


def toy_instance(n: int = 8, targets=((0, 2, 0),), impassable=()) -> SceneInstance:
    """Empty n x n grid with one unit-square object per target pose."""
    objects = tuple(ObjectFootprint(i, unit_square()) for i in range(len(targets)))
    return SceneInstance(n, frozenset(impassable), objects, tuple(Pose(*t) for t in targets))


def layout(*poses, step: int = 0) -> LayoutState:
    return LayoutState(tuple(Pose(*p) for p in poses), step)


@pytest.fixture
def toy():
    return toy_instance


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
