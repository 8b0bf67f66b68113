"""Network-guided Monte Carlo tree search with max-backup values.

Selection scores edges by prior / (n_sa + 1) + C * sqrt(ln(n_s + 1) / (n_sa + 1)).
Leaves are valued by the network (success leaves by 0), and each node's value
is the best one-step lookahead over its expanded children:
V(s) = max_a R(s, a) + gamma * V(child).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .scene import (
    NUM_MOVES,
    Action,
    LayoutState,
    SceneInstance,
    feasible_list,
    is_success,
    transition,
)

# (instance, state, feasibility mask) -> (priors over the 6K actions, value)
Evaluator = Callable[[SceneInstance, LayoutState, Sequence[bool]], tuple[np.ndarray, float]]


class JammedState(RuntimeError):
    """No object can move; the episode is a failure."""


class TerminalRoot(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    rounds: int = 50
    c: float = 1.414
    gamma: float = 0.99
    reuse_subtree: bool = False

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.c <= 0:
            raise ValueError("exploration constant must be positive")
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must lie in (0, 1]")


def uct_score(prior: float, n_sa: int, n_s: int, c: float) -> float:
    return prior / (n_sa + 1) + c * math.sqrt(math.log(n_s + 1) / (n_sa + 1))


class SearchNode:
    __slots__ = ("state", "actions", "priors", "n_s", "n_sa", "children", "rewards",
                 "v_leaf", "v_backed", "terminal", "success")

    def __init__(self, inst: SceneInstance, state: LayoutState, evaluator: Evaluator):
        self.state = state
        self.n_s = 1
        self.children: list[SearchNode | None] = []
        self.rewards: list[float] = []
        self.success = is_success(inst, state)
        mask = [] if self.success else feasible_list(inst, state)
        self.actions = [i for i, ok in enumerate(mask) if ok]
        self.terminal = self.success or not self.actions
        if self.terminal:
            self.priors: list[float] = []
            self.v_leaf = 0.0
        else:
            priors, value = evaluator(inst, state, mask)
            p = np.asarray(priors, dtype=np.float64)[self.actions]
            total = p.sum()
            p = p / total if total > 0 else np.full(len(self.actions), 1.0 / len(self.actions))
            self.priors = p.tolist()
            self.v_leaf = float(value)
        self.v_backed = self.v_leaf
        self.n_sa = [0] * len(self.actions)
        self.children = [None] * len(self.actions)
        self.rewards = [0.0] * len(self.actions)

    def edge_values(self, gamma: float) -> list[float | None]:
        """R(s, a) + gamma * V(child) per edge, None where unexpanded."""
        return [None if ch is None else r + gamma * ch.v_backed
                for ch, r in zip(self.children, self.rewards)]

    def backup(self, gamma: float) -> None:
        best = None
        for ch, r in zip(self.children, self.rewards):
            if ch is not None:
                e = r + gamma * ch.v_backed
                if best is None or e > best:
                    best = e
        self.v_backed = self.v_leaf if best is None else best


@dataclass
class ExpertDecision:
    action: Action
    expert_value: float
    visit_counts: np.ndarray
    root_priors: np.ndarray
    edge_values: np.ndarray


class SearchTree:
    def __init__(self, inst: SceneInstance, state: LayoutState, evaluator: Evaluator):
        self.inst = inst
        self.root = SearchNode(inst, state, evaluator)
        self.expansions = 1

    def advance(self, flat_action: int) -> "SearchTree | None":
        """Re-root at the child reached by ``flat_action``, if it was expanded."""
        root = self.root
        if flat_action not in root.actions:
            return None
        child = root.children[root.actions.index(flat_action)]
        if child is None:
            return None
        tree = SearchTree.__new__(SearchTree)
        tree.inst = self.inst
        tree.root = child
        tree.expansions = 0
        return tree


def run_simulation(tree: SearchTree, evaluator: Evaluator, cfg: SearchConfig) -> bool:
    """One selection/expansion/evaluation/backup pass. Returns False on a terminal root."""
    node = tree.root
    if node.terminal:
        return False
    inst = tree.inst
    path: list[tuple[SearchNode, int]] = []
    c = cfg.c
    while not node.terminal:
        log_ns = math.log(node.n_s + 1)
        best_i, best = 0, -math.inf
        for i, (prior, n) in enumerate(zip(node.priors, node.n_sa)):
            score = prior / (n + 1) + c * math.sqrt(log_ns / (n + 1))
            if score > best:
                best_i, best = i, score
        path.append((node, best_i))
        child = node.children[best_i]
        if child is None:
            out = transition(inst, node.state, Action.from_flat(node.actions[best_i]))
            node.children[best_i] = SearchNode(inst, out.next, evaluator)
            node.rewards[best_i] = out.reward
            tree.expansions += 1
            break
        node = child
    for parent, i in reversed(path):
        parent.n_sa[i] += 1
        parent.n_s += 1
        parent.backup(cfg.gamma)
    return True


def decide(tree: SearchTree, cfg: SearchConfig) -> ExpertDecision:
    """Best root edge by R + gamma * V among expanded edges; lowest index wins ties."""
    root = tree.root
    k6 = tree.inst.num_objects * NUM_MOVES
    visits = np.zeros(k6, dtype=np.int64)
    priors = np.zeros(k6)
    values = np.full(k6, np.nan)
    best_i, best = None, -math.inf
    for i, (a, e) in enumerate(zip(root.actions, root.edge_values(cfg.gamma))):
        visits[a] = root.n_sa[i]
        priors[a] = root.priors[i]
        if e is not None:
            values[a] = e
            if e > best:
                best_i, best = i, e
    if best_i is None:
        # nothing expanded (a single round): fall back to the prior and the leaf value
        best_i = int(np.argmax(root.priors))
        best = root.v_leaf
    return ExpertDecision(Action.from_flat(root.actions[best_i]), float(best), visits, priors, values)


def run_search(inst: SceneInstance, s: LayoutState, evaluator: Evaluator, cfg: SearchConfig,
               tree: SearchTree | None = None) -> tuple[ExpertDecision, SearchTree]:
    """Search from ``s``; building the root counts as the first of ``cfg.rounds``."""
    if tree is None or tree.root.state.poses != s.poses:
        tree = SearchTree(inst, s, evaluator)
    root = tree.root
    if root.success:
        raise TerminalRoot("search started from a solved layout")
    if root.terminal:
        raise JammedState("no feasible action in the root layout")
    for _ in range(cfg.rounds - 1):
        run_simulation(tree, evaluator, cfg)
    return decide(tree, cfg), tree


def check_tree(tree: SearchTree, gamma: float, tol: float = 1e-9) -> None:
    """Assert visit-count, prior and max-backup identities on every node."""
    stack = [tree.root]
    while stack:
        node = stack.pop()
        if node.terminal:
            assert node.v_backed == 0.0 and not node.actions
            continue
        assert node.n_s == sum(node.n_sa) + 1, "visit counts out of sync"
        assert abs(sum(node.priors) - 1.0) < 1e-9, "priors not normalized"
        expanded = [(r + gamma * ch.v_backed) for ch, r in zip(node.children, node.rewards) if ch is not None]
        want = max(expanded) if expanded else node.v_leaf
        assert abs(node.v_backed - want) <= tol, "max-backup identity violated"
        stack.extend(ch for ch in node.children if ch is not None)
