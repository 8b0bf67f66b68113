"""Scene rearrangement planning: grid environment, guided tree search and self-play training."""

from .scene import (
    Action,
    LayoutState,
    ObjectFootprint,
    Pose,
    SceneInstance,
    StepOutcome,
    apply_action,
    build_state_tensor,
    feasible_actions,
    is_success,
    pose_distance,
    rasterize_footprint,
)
from .search import SearchConfig, run_search

__all__ = [
    "Action", "LayoutState", "ObjectFootprint", "Pose", "SceneInstance", "StepOutcome",
    "apply_action", "build_state_tensor", "feasible_actions", "is_success", "pose_distance",
    "rasterize_footprint", "SearchConfig", "run_search",
]
__version__ = "0.1.0"
