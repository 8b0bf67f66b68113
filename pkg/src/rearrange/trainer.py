"""Self-play training in three modes: pearl and exit learn from the search expert, rl is plain actor-critic.

Training runs in synchronous rounds. At the start of a round every worker
takes the latest published parameter snapshot and plays its share of the
round's episodes; the learner then merges the records in episode order,
pushes them to replay, runs its updates and publishes a new snapshot. Each
episode owns an rng derived from (seed, episode index), so the records do not
depend on how many workers played them.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .network import (
    AdamState,
    ArchConfig,
    ModelParams,
    NetworkEvaluator,
    apply_gradients,
    combined_loss,
    init_params,
    save_checkpoint,
    value_only,
)
from .replay import Experience, PrioritizedReplay, ReplayConfig, ReplayNotReady
from .scene import (
    Action,
    LayoutState,
    SceneInstance,
    apply_action,
    feasible_list,
    is_success,
    padded_mask,
    state_planes,
)
from .search import SearchConfig, run_search

log = logging.getLogger(__name__)

MODES = ("pearl", "exit", "rl")
CRITIC_TARGETS = ("return", "expert")
METRIC_FIELDS = ("episode", "mode", "instance_id", "success", "length", "reward",
                 "SR_rolling", "Length_rolling", "policy_loss", "value_loss",
                 "imitation_loss", "params_version")

Dataset = Sequence[tuple[str, SceneInstance, LayoutState]]


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    k: int = 5
    lr: float = 1e-4
    batch: int = 200
    beta_im: float = 0.1
    # fraction of training over which beta_im decays linearly to zero
    beta_im_decay: float = 0.25
    value_coef: float = 1.0
    # critic target in the expert modes: "return" regresses on the observed
    # discounted return-to-go, "expert" on the search's root max-backup
    critic_target: str = "return"

    def __post_init__(self) -> None:
        if self.critic_target not in CRITIC_TARGETS:
            raise ValueError(f"critic_target must be one of {CRITIC_TARGETS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.beta_im < 0:
            raise ValueError("beta_im must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "pearl"
    episodes: int = 1000
    workers: int = 8
    episodes_per_round: int = 8
    # serial runs the round's episodes in-process, one after another
    serial: bool = True
    train_step_limit: int = 100
    test_step_limit: int = 200
    updates_per_episode: float = 2.0
    eval_every: int = 0
    rolling_window: int = 100
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.2
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.workers < 1 or self.episodes_per_round < 1:
            raise ValueError("workers and episodes_per_round must be >= 1")
        if self.train_step_limit <= 0 or self.test_step_limit <= 0:
            raise ValueError("step limits must be positive")
        if self.episodes < 0:
            raise ValueError("episodes must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        nested = {"arch": ArchConfig, "search": SearchConfig, "train": TrainConfig, "replay": ReplayConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        return cls(**d)

    def epsilon(self, episode: int) -> float:
        span = max(1.0, self.eps_fraction * self.episodes)
        f = min(1.0, episode / span)
        return self.eps_start + f * (self.eps_end - self.eps_start)


@dataclass
class EpisodeRecord:
    instance_id: str
    experiences: list[Experience]
    success: bool
    length: int
    reward: float
    jammed: bool = False
    params_version: int = 0


def _select_rl_action(probs: np.ndarray, mask: Sequence[bool], eps: float,
                      rng: np.random.Generator) -> int:
    if rng.random() < eps:
        feasible = [i for i, ok in enumerate(mask) if ok]
        return feasible[int(rng.integers(len(feasible)))]
    return int(rng.choice(len(probs), p=probs))


def run_episode(inst: SceneInstance, initial: LayoutState, params: ModelParams, arch: ArchConfig,
                mode: str, cfg: RunConfig, rng: np.random.Generator, instance_id: str = "",
                epsilon: float = 0.0, step_limit: int | None = None) -> EpisodeRecord:
    """Play one episode; expert modes decide by search, rl samples the policy."""
    limit = cfg.train_step_limit if step_limit is None else step_limit
    evaluator = NetworkEvaluator(params, arch)
    k_max = arch.k_max
    s = LayoutState(initial.poses, 0)
    planes, masks, actions, rewards, values, expert_actions = [], [], [], [], [], []
    success = is_success(inst, s)
    jammed = False
    tree = None
    while not success and len(actions) < limit:
        mask = feasible_list(inst, s)
        if not any(mask):
            jammed = True
            break
        if mode == "rl":
            probs, _ = evaluator(inst, s, mask)
            a = _select_rl_action(probs, mask, epsilon, rng)
            values.append(None)
            expert_actions.append(None)
        else:
            decision, tree = run_search(inst, s, evaluator, cfg.search, tree)
            a = decision.action.flat_index
            values.append(decision.expert_value)
            expert_actions.append(a)
        planes.append(state_planes(inst, s, k_max))
        masks.append(padded_mask(mask, k_max))
        actions.append(a)
        out = apply_action(inst, s, Action.from_flat(a))
        rewards.append(out.reward)
        success = out.success
        tree = tree.advance(a) if (tree is not None and cfg.search.reuse_subtree) else None
        s = out.next

    final_planes = state_planes(inst, s, k_max)
    terminal_end = success or jammed
    k = cfg.train.k
    n = len(actions)
    to_go = [0.0] * (n + 1)  # a truncated tail counts as zero
    for t in range(n - 1, -1, -1):
        to_go[t] = rewards[t] + cfg.train.gamma * to_go[t + 1]
    exps = []
    for t in range(n):
        end = min(t + k, n)
        boot, boot_state = None, None
        if end < n:
            if mode == "rl":
                boot_state = planes[end]
            else:
                boot = values[end]
        elif not terminal_end:
            boot_state = final_planes
        exps.append(Experience(
            state=planes[t], mask=masks[t], action=actions[t], reward=rewards[t],
            terminal=(t == n - 1 and terminal_end), rewards_ahead=tuple(rewards[t:end]),
            expert_value=values[t], expert_action=expert_actions[t],
            bootstrap=boot, bootstrap_state=boot_state, instance_id=instance_id,
            return_to_go=to_go[t]))
    return EpisodeRecord(instance_id, exps, success, n, float(sum(rewards)), jammed, params.version)


# ---------------------------------------------------------------------------
# learner


def _bootstrap_values(items: Sequence[Experience], params: ModelParams, arch: ArchConfig) -> np.ndarray:
    boots = np.array([0.0 if e.bootstrap is None else e.bootstrap for e in items])
    need = [i for i, e in enumerate(items) if e.bootstrap_state is not None]
    if need:
        states = np.stack([items[i].bootstrap_state for i in need])
        boots[need] = value_only(params, arch, states)
    return boots


def learning_targets(items: Sequence[Experience], params: ModelParams, arch: ArchConfig,
                     mode: str, gamma: float, critic_target: str = "expert"
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(critic values now, critic targets, advantages) for a batch."""
    states = np.stack([e.state for e in items])
    v_now = value_only(params, arch, states)
    boots = _bootstrap_values(items, params, arch)
    returns = np.array([e.discounted_return(gamma) + gamma ** len(e.rewards_ahead) * b
                        for e, b in zip(items, boots)])
    if mode == "rl":
        targets = returns
    elif critic_target == "return":
        targets = np.array([e.return_to_go for e in items], dtype=np.float64)
    else:
        targets = np.array([e.expert_value for e in items], dtype=np.float64)
    return v_now, targets, returns - v_now


@dataclass
class Learner:
    cfg: RunConfig
    params: ModelParams
    opt: AdamState
    replay: PrioritizedReplay
    rng: np.random.Generator
    floored: int = 0
    skipped_steps: int = 0

    def push_episode(self, record: EpisodeRecord) -> None:
        if not record.experiences:
            return
        tc = self.cfg.train
        v_now, targets, _ = learning_targets(record.experiences, self.params, self.cfg.arch,
                                             self.cfg.mode, tc.gamma, tc.critic_target)
        for e, err in zip(record.experiences, v_now - targets):
            self.replay.push(e, float(err))

    def beta_im(self, progress: float) -> float:
        tc = self.cfg.train
        if tc.beta_im_decay <= 0:
            return tc.beta_im
        return tc.beta_im * max(0.0, 1.0 - progress / tc.beta_im_decay)

    def step(self, progress: float) -> dict[str, float] | None:
        tc, mode, arch = self.cfg.train, self.cfg.mode, self.cfg.arch
        try:
            items, ids, w = self.replay.sample(tc.batch, self.rng)
        except ReplayNotReady:
            return None
        v_now, targets, adv = learning_targets(items, self.params, arch, mode, tc.gamma,
                                               tc.critic_target)
        states = np.stack([e.state for e in items])
        masks = np.stack([e.mask for e in items])
        actions = np.array([e.action for e in items])
        inv = 1.0 / len(items)
        coefs = dict(value_coef=tc.value_coef * inv)
        if mode == "pearl":
            coefs.update(policy_coef=inv, imitation_coef=self.beta_im(progress) * inv)
        elif mode == "exit":
            coefs.update(imitation_coef=inv)
        else:
            coefs.update(policy_coef=inv)
        res = combined_loss(self.params, arch, states, masks, actions=actions, advantages=adv,
                            value_targets=targets, weights=w, **coefs)
        self.floored += res.floored
        if not math.isfinite(res.loss):
            log.warning("skipping batch with non-finite loss")
            self.skipped_steps += 1
            return None
        self.params, self.opt, applied = apply_gradients(self.params, res.grads, tc.lr, self.opt)
        if not applied:
            self.skipped_steps += 1
        self.replay.update_priorities(ids, v_now - targets)
        return {k: v * inv for k, v in res.components.items()}


# ---------------------------------------------------------------------------
# orchestration


class SnapshotSlot:
    """Single-writer slot for the latest parameters; readers get immutable copies."""

    def __init__(self, params: ModelParams):
        self._lock = threading.Lock()
        self._params = params.copy()

    def publish(self, params: ModelParams) -> None:
        snap = params.copy()
        with self._lock:
            if snap.version < self._params.version:
                raise ValueError("snapshot versions must not decrease")
            self._params = snap

    def latest(self) -> ModelParams:
        with self._lock:
            return self._params


def _episode_task(args):
    inst, initial, params, arch, mode, cfg, seed_seq, instance_id, eps = args
    return run_episode(inst, initial, params, arch, mode, cfg, np.random.default_rng(seed_seq),
                       instance_id, eps)


class InstanceSampler:
    """Uniform without replacement within an epoch, reshuffled each epoch."""

    def __init__(self, n: int, seed: int):
        if n == 0:
            raise ValueError("dataset is empty")
        self.n, self.seed = n, seed
        self.epoch, self.pos = 0, 0
        self.order = self._shuffle()

    def _shuffle(self) -> np.ndarray:
        return np.random.default_rng([self.seed, 2, self.epoch]).permutation(self.n)

    def next(self) -> int:
        if self.pos == self.n:
            self.epoch += 1
            self.pos = 0
            self.order = self._shuffle()
        i = int(self.order[self.pos])
        self.pos += 1
        return i


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[dict]
    checkpoints: list[dict]
    wall_seconds: float = 0.0


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in METRIC_FIELDS])
    return buf.getvalue()


def train(cfg: RunConfig, dataset: Dataset, out_dir: str | Path | None = None,
          evaluate_fn: Callable[[ModelParams], tuple[float, float]] | None = None,
          params: ModelParams | None = None,
          progress: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Run the training loop; writes metrics.csv, timing.csv and checkpoints under ``out_dir``."""
    started = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    arch = cfg.arch
    params = init_params(arch, cfg.seed) if params is None else params
    learner = Learner(cfg, params, AdamState.zeros_like(params), PrioritizedReplay(cfg.replay),
                      np.random.default_rng([cfg.seed, 1]))
    slot = SnapshotSlot(params)
    rows: list[dict] = []
    checkpoints: list[dict] = []
    timing = ["round,episodes_done,wall_seconds"]
    if cfg.episodes == 0:
        if out is not None:
            (out / "metrics.csv").write_text(metrics_csv(rows))
        return TrainResult(params, rows, checkpoints, time.perf_counter() - started)

    sampler = InstanceSampler(len(dataset), cfg.seed)
    window_s: list[int] = []
    window_l: list[int] = []
    pool = None
    if not cfg.serial and cfg.workers > 1:
        pool = ProcessPoolExecutor(max_workers=cfg.workers)
    update_debt = 0.0
    done = 0
    rnd = 0
    next_eval = cfg.eval_every if cfg.eval_every > 0 else None
    try:
        while done < cfg.episodes:
            snap = slot.latest()
            count = min(cfg.episodes_per_round, cfg.episodes - done)
            tasks = []
            for e in range(done, done + count):
                iid, inst, initial = dataset[sampler.next()]
                eps = cfg.epsilon(e) if cfg.mode == "rl" else 0.0
                tasks.append((inst, initial, snap, arch, cfg.mode, cfg,
                              np.random.SeedSequence([cfg.seed, 3, e]), iid, eps))
            if pool is None:
                records = [_episode_task(t) for t in tasks]
            else:
                records = list(pool.map(_episode_task, tasks))

            for rec in records:
                learner.push_episode(rec)
            update_debt += cfg.updates_per_episode * count
            n_updates = int(update_debt)
            update_debt -= n_updates
            losses: dict[str, list[float]] = {"policy": [], "value": [], "imitation": []}
            progress_frac = (done + count) / cfg.episodes
            learner.replay.anneal_beta(progress_frac)
            for _ in range(n_updates):
                comps = learner.step(progress_frac)
                if comps is None:
                    continue
                for key, val in comps.items():
                    losses[key].append(val)
            slot.publish(learner.params)

            mean_loss = {k: (float(np.mean(v)) if v else 0.0) for k, v in losses.items()}
            for i, rec in enumerate(records):
                length = rec.length if rec.success else cfg.train_step_limit
                window_s.append(int(rec.success))
                window_l.append(length)
                del window_s[:-cfg.rolling_window], window_l[:-cfg.rolling_window]
                row = {
                    "episode": done + i + 1, "mode": cfg.mode, "instance_id": rec.instance_id,
                    "success": int(rec.success), "length": rec.length, "reward": rec.reward,
                    "SR_rolling": sum(window_s) / len(window_s),
                    "Length_rolling": sum(window_l) / len(window_l),
                    "policy_loss": mean_loss["policy"], "value_loss": mean_loss["value"],
                    "imitation_loss": mean_loss["imitation"], "params_version": rec.params_version,
                }
                rows.append(row)
                if progress is not None:
                    progress(done + i + 1, row)
            done += count
            rnd += 1
            timing.append(f"{rnd},{done},{time.perf_counter() - started:.3f}")

            last = done >= cfg.episodes
            if (next_eval is not None and done >= next_eval) or last:
                entry = {"episode": done, "version": learner.params.version}
                if out is not None:
                    path = out / "checkpoints" / f"ckpt_{done:06d}.npz"
                    save_checkpoint(path, learner.params, arch, episode=done, mode=cfg.mode)
                    entry["path"] = str(path)
                if evaluate_fn is not None:
                    entry["SR"], entry["Length"] = evaluate_fn(learner.params)
                checkpoints.append(entry)
                if next_eval is not None:
                    while next_eval <= done:
                        next_eval += cfg.eval_every
    finally:
        if pool is not None:
            pool.shutdown()

    if learner.floored:
        log.info("%d log-probabilities hit the numerical floor", learner.floored)
    if out is not None:
        (out / "metrics.csv").write_text(metrics_csv(rows))
        (out / "timing.csv").write_text("\n".join(timing) + "\n")
        if checkpoints and all("SR" in c for c in checkpoints):
            with open(out / "checkpoints.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["episode", "version", "SR", "Length", "path"],
                                   extrasaction="ignore", lineterminator="\n")
                w.writeheader()
                w.writerows(checkpoints)
    return TrainResult(learner.params, rows, checkpoints, time.perf_counter() - started)


def checkpoint_select(entries: Sequence[dict]) -> int:
    """Index of the best evaluated checkpoint: highest SR, then shorter Length, then earlier."""
    if not entries:
        raise ValueError("no evaluated checkpoints to select from")
    best = 0
    for i, e in enumerate(entries):
        b = entries[best]
        if (e["SR"], -e["Length"]) > (b["SR"], -b["Length"]):
            best = i
    return best


def recompute_rolling(rows: Sequence[dict], window: int, step_limit: int) -> list[tuple[float, float]]:
    """Rolling SR / Length recomputed from the per-episode fields."""
    out = []
    for i in range(len(rows)):
        chunk = rows[max(0, i + 1 - window):i + 1]
        sr = sum(int(r["success"]) for r in chunk) / len(chunk)
        ln = sum(int(r["length"]) if int(r["success"]) else step_limit for r in chunk) / len(chunk)
        out.append((sr, ln))
    return out


def episodes_to_fraction(rows: Sequence[dict], fraction: float = 0.5) -> int | None:
    """First episode whose rolling SR reaches ``fraction`` of the final rolling SR."""
    if not rows:
        return None
    final = float(rows[-1]["SR_rolling"])
    if final <= 0:
        return None
    for r in rows:
        if float(r["SR_rolling"]) >= fraction * final:
            return int(r["episode"])
    return None
