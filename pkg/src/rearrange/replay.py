"""Proportional prioritized replay keyed on critic error."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np


class ReplayNotReady(RuntimeError):
    pass


@dataclass(frozen=True)
class ReplayConfig:
    capacity: int = 10_000
    alpha: float = 0.6
    beta: float = 0.4
    beta_final: float = 1.0
    eps: float = 1e-3
    # False gives plain prioritized sampling without importance weights
    importance_correction: bool = True

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not (0 <= self.beta <= 1 and 0 <= self.beta_final <= 1):
            raise ValueError("beta must lie in [0, 1]")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


class PrioritizedReplay:
    """Ring buffer with FIFO eviction and sampling proportional to priority.

    Indices handed out by :meth:`sample` are insertion ids, so an update for an
    item that has since been evicted is detected and skipped.
    """

    def __init__(self, cfg: ReplayConfig = ReplayConfig()):
        self.cfg = cfg
        self.beta = cfg.beta
        self._items: list[Any] = [None] * cfg.capacity
        self._prio = np.zeros(cfg.capacity)
        self._pushed = 0
        self._lock = threading.Lock()
        self.stale_updates = 0

    def __len__(self) -> int:
        return min(self._pushed, self.cfg.capacity)

    @property
    def total_pushed(self) -> int:
        return self._pushed

    def priority_of(self, critic_error: float) -> float:
        return (abs(float(critic_error)) + self.cfg.eps) ** self.cfg.alpha

    def push(self, item: Any, critic_error: float = 0.0, *, priority: float | None = None) -> int:
        """Insert, evicting the oldest item when full. ``priority`` bypasses the error mapping."""
        p = self.priority_of(critic_error) if priority is None else float(priority)
        if not np.isfinite(p) or p <= 0:
            raise ValueError("priority must be finite and positive")
        with self._lock:
            uid = self._pushed
            slot = uid % self.cfg.capacity
            self._items[slot] = item
            self._prio[slot] = p
            self._pushed += 1
        return uid

    def ready(self, n: int) -> bool:
        return len(self) >= n

    def items(self) -> list[Any]:
        """Live items, oldest first."""
        with self._lock:
            size = len(self)
            first = self._pushed - size
            return [self._items[u % self.cfg.capacity] for u in range(first, self._pushed)]

    def probabilities(self) -> np.ndarray:
        with self._lock:
            p = self._prio[:len(self)].copy()
        return p / p.sum()

    def sample(self, n: int, rng: np.random.Generator) -> tuple[list[Any], np.ndarray, np.ndarray]:
        """Draw ``n`` items with replacement; returns (items, insertion ids, importance weights)."""
        with self._lock:
            size = len(self)
            if size < n or size == 0:
                raise ReplayNotReady(f"buffer holds {size} items, {n} requested")
            prio = self._prio[:size]
            probs = prio / prio.sum()
            slots = rng.choice(size, size=n, replace=True, p=probs)
            items = [self._items[s] for s in slots]
            last = self._pushed - 1
            ids = last - (last - slots) % self.cfg.capacity
        if self.cfg.importance_correction and self.beta > 0:
            w = (size * probs[slots]) ** (-self.beta)
            w = w / w.max()
        else:
            w = np.ones(n)
        return items, ids.astype(np.int64), w

    def update_priorities(self, ids: Sequence[int], critic_errors: Sequence[float]) -> int:
        """Reprioritize live items; returns how many ids were stale."""
        stale = 0
        with self._lock:
            oldest = self._pushed - len(self)
            for uid, err in zip(ids, critic_errors):
                uid = int(uid)
                if uid < oldest or uid >= self._pushed:
                    stale += 1
                    continue
                self._prio[uid % self.cfg.capacity] = self.priority_of(err)
            self.stale_updates += stale
        return stale

    def anneal_beta(self, fraction: float) -> None:
        f = min(max(fraction, 0.0), 1.0)
        self.beta = self.cfg.beta + f * (self.cfg.beta_final - self.cfg.beta)


@dataclass
class Experience:
    """One decision of an episode plus what the learner needs to score it.

    ``bootstrap`` is the value of the state ``len(rewards_ahead)`` steps later
    when the search provided it; otherwise ``bootstrap_state`` holds that state
    for the critic to value at training time. Both unset means the segment
    ended in a terminal state. ``return_to_go`` is the discounted sum of the
    rewards observed from this step to the end of the episode.
    """

    state: np.ndarray
    mask: np.ndarray
    action: int
    reward: float
    terminal: bool
    rewards_ahead: tuple[float, ...]
    expert_value: float | None = None
    expert_action: int | None = None
    bootstrap: float | None = None
    bootstrap_state: np.ndarray | None = None
    instance_id: str = ""
    return_to_go: float | None = None

    def discounted_return(self, gamma: float) -> float:
        return sum(gamma ** i * r for i, r in enumerate(self.rewards_ahead))
