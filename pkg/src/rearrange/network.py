"""Actor-critic network with a shared convolutional encoder, in plain numpy.

Layout: conv stack (ReLU) -> flatten -> actor FC (ReLU) -> 6 * k_max logits,
and critic FC (ReLU) -> scalar value on the same encoder features. The three
training losses backpropagate by hand through this fixed architecture.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .scene import NUM_MOVES, LayoutState, SceneInstance, padded_mask, state_planes

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
CHECKPOINT_FORMAT = 1


class NoFeasibleAction(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    grid_size: int = 16
    k_max: int = 25
    conv_channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    fc_width: int = 128

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if min((self.grid_size, self.k_max, self.kernel, self.stride, self.fc_width,
                *self.conv_channels)) < 1:
            raise ValueError("all architecture widths must be >= 1")

    @property
    def in_channels(self) -> int:
        return 2 * self.k_max + 1

    @property
    def num_actions(self) -> int:
        return NUM_MOVES * self.k_max

    def spatial_sizes(self) -> list[int]:
        sizes = [self.grid_size]
        for _ in self.conv_channels:
            sizes.append((sizes[-1] + 2 * self.padding - self.kernel) // self.stride + 1)
        if sizes[-1] < 1:
            raise ValueError("grid too small for the conv stack")
        return sizes

    @property
    def feature_size(self) -> int:
        return self.conv_channels[-1] * self.spatial_sizes()[-1] ** 2

    @classmethod
    def full_scale(cls, grid_size: int = 64) -> "ArchConfig":
        return cls(grid_size=grid_size, k_max=25, conv_channels=(16, 32, 64), fc_width=512)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


@dataclass(frozen=True)
class ModelParams:
    arrays: dict[str, np.ndarray]
    version: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.version)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())


@dataclass
class NetOutput:
    probs: np.ndarray   # (B, 6 * k_max), zero on infeasible entries
    value: np.ndarray   # (B,)


@dataclass
class LossResult:
    loss: float
    grads: dict[str, np.ndarray]
    components: dict[str, float] = field(default_factory=dict)
    floored: int = 0


def init_params(arch: ArchConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    cin = arch.in_channels
    for i, cout in enumerate(arch.conv_channels):
        fan_in = cin * arch.kernel ** 2
        p[f"conv{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, arch.kernel, arch.kernel))
        p[f"conv{i}.b"] = np.zeros(cout)
        cin = cout
    d, f = arch.feature_size, arch.fc_width
    for head in ("actor", "critic"):
        p[f"{head}_fc.w"] = rng.normal(0.0, np.sqrt(2.0 / d), (f, d))
        p[f"{head}_fc.b"] = np.zeros(f)
    # small output layers: near-uniform policy and near-zero value at start
    p["actor_out.w"] = rng.normal(0.0, 0.01 / np.sqrt(f), (arch.num_actions, f))
    p["actor_out.b"] = np.zeros(arch.num_actions)
    p["critic_out.w"] = rng.normal(0.0, 0.01 / np.sqrt(f), (1, f))
    p["critic_out.b"] = np.zeros(1)
    return ModelParams(p, 0)


def _im2col(x: np.ndarray, k: int, s: int, pad: int) -> tuple[np.ndarray, int, int]:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], k: int, s: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    b, c, h, w = shape
    d = dcols.reshape(b, ho, wo, c, k, k)
    dx = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx[:, :, pad:pad + h, pad:pad + w]


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if not mask.any(axis=1).all():
        raise NoFeasibleAction("a state has no feasible action")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def _forward(params: ModelParams, arch: ArchConfig, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
    p = params.arrays
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    cache: dict = {"conv": []}
    h = x
    for i, cout in enumerate(arch.conv_channels):
        cols, ho, wo = _im2col(h, arch.kernel, arch.stride, arch.padding)
        w = p[f"conv{i}.w"]
        z = cols @ w.reshape(cout, -1).T + p[f"conv{i}.b"]
        a = np.maximum(z, 0.0)
        cache["conv"].append((h.shape, cols, z, ho, wo))
        h = a.reshape(x.shape[0], ho, wo, cout).transpose(0, 3, 1, 2)
    feat = h.reshape(x.shape[0], -1)
    za = feat @ p["actor_fc.w"].T + p["actor_fc.b"]
    ha = np.maximum(za, 0.0)
    logits = ha @ p["actor_out.w"].T + p["actor_out.b"]
    zc = feat @ p["critic_fc.w"].T + p["critic_fc.b"]
    hc = np.maximum(zc, 0.0)
    value = (hc @ p["critic_out.w"].T + p["critic_out.b"])[:, 0]
    cache.update(feat=feat, za=za, ha=ha, zc=zc, hc=hc, feat_shape=h.shape)
    return logits, value, cache


def _backward(params: ModelParams, arch: ArchConfig, cache: dict,
              dlogits: np.ndarray, dvalue: np.ndarray) -> dict[str, np.ndarray]:
    p = params.arrays
    g: dict[str, np.ndarray] = {}
    g["actor_out.w"] = dlogits.T @ cache["ha"]
    g["actor_out.b"] = dlogits.sum(axis=0)
    dza = (dlogits @ p["actor_out.w"]) * (cache["za"] > 0)
    g["actor_fc.w"] = dza.T @ cache["feat"]
    g["actor_fc.b"] = dza.sum(axis=0)
    dv = dvalue[:, None]
    g["critic_out.w"] = dv.T @ cache["hc"]
    g["critic_out.b"] = dv.sum(axis=0)
    dzc = (dv @ p["critic_out.w"]) * (cache["zc"] > 0)
    g["critic_fc.w"] = dzc.T @ cache["feat"]
    g["critic_fc.b"] = dzc.sum(axis=0)
    dfeat = dza @ p["actor_fc.w"] + dzc @ p["critic_fc.w"]
    dh = dfeat.reshape(cache["feat_shape"])
    for i in reversed(range(len(arch.conv_channels))):
        in_shape, cols, z, ho, wo = cache["conv"][i]
        cout = arch.conv_channels[i]
        dz = dh.transpose(0, 2, 3, 1).reshape(-1, cout) * (z > 0)
        w = p[f"conv{i}.w"]
        g[f"conv{i}.w"] = (dz.T @ cols).reshape(w.shape)
        g[f"conv{i}.b"] = dz.sum(axis=0)
        if i > 0:
            dh = _col2im(dz @ w.reshape(cout, -1), in_shape, arch.kernel, arch.stride,
                         arch.padding, ho, wo)
    return g


def forward(params: ModelParams, arch: ArchConfig, states: np.ndarray, masks: np.ndarray) -> NetOutput:
    """Masked action distribution and value for a batch (or a single state)."""
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim == 1:
        masks = masks[None]
    logits, value, _ = _forward(params, arch, states)
    return NetOutput(masked_softmax(logits, masks), value)


def value_only(params: ModelParams, arch: ArchConfig, states: np.ndarray) -> np.ndarray:
    return _forward(params, arch, states)[1]


def compute_advantage(rewards: Sequence[float], bootstrap: float, v_now: float,
                      gamma: float, k: int | None = None) -> float:
    """Discounted segment return plus discounted bootstrap, minus the baseline."""
    m = len(rewards)
    if m < 1 or (k is not None and m > k):
        raise ValueError("segment must hold between 1 and k rewards")
    ret = sum(gamma ** i * r for i, r in enumerate(rewards))
    return ret + gamma ** m * bootstrap - v_now


def _ones(n: int, w: np.ndarray | None) -> np.ndarray:
    return np.ones(n) if w is None else np.asarray(w, dtype=np.float64)


def _log_likelihood_terms(probs: np.ndarray, actions: np.ndarray, coef: np.ndarray):
    """Loss sum(coef * -log p_a) and its gradient with respect to the logits."""
    rows = np.arange(len(actions))
    pa = probs[rows, actions]
    floored = pa < LOG_FLOOR
    loss = float(-(coef * np.log(np.maximum(pa, LOG_FLOOR))).sum())
    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    dlogits = (coef * ~floored)[:, None] * (probs - onehot)
    return loss, dlogits, int(floored.sum())


def combined_loss(params: ModelParams, arch: ArchConfig, states: np.ndarray, masks: np.ndarray,
                  actions: np.ndarray | None = None, advantages: np.ndarray | None = None,
                  value_targets: np.ndarray | None = None, weights: np.ndarray | None = None,
                  policy_coef: float = 0.0, value_coef: float = 0.0,
                  imitation_coef: float = 0.0, imitation_actions: np.ndarray | None = None) -> LossResult:
    """policy_coef * L_p + value_coef * L_v + imitation_coef * L_im with one shared backward pass."""
    masks = np.asarray(masks, dtype=bool)
    logits, value, cache = _forward(params, arch, states)
    probs = masked_softmax(logits, masks)
    n = probs.shape[0]
    w = _ones(n, weights)
    dlogits = np.zeros_like(logits)
    dvalue = np.zeros(n)
    comps: dict[str, float] = {}
    floored = 0
    total = 0.0
    if policy_coef:
        lp, dl, fl = _log_likelihood_terms(probs, np.asarray(actions), w * np.asarray(advantages, dtype=np.float64))
        comps["policy"] = lp
        total += policy_coef * lp
        dlogits += policy_coef * dl
        floored += fl
    if imitation_coef:
        acts = np.asarray(actions if imitation_actions is None else imitation_actions)
        li, dl, fl = _log_likelihood_terms(probs, acts, w)
        comps["imitation"] = li
        total += imitation_coef * li
        dlogits += imitation_coef * dl
        floored += fl
    if value_coef:
        err = value - np.asarray(value_targets, dtype=np.float64)
        lv = float((w * err ** 2).sum())
        comps["value"] = lv
        total += value_coef * lv
        dvalue += value_coef * 2.0 * w * err
    grads = _backward(params, arch, cache, dlogits, dvalue)
    return LossResult(total, grads, comps, floored)


def policy_loss(params, arch, states, masks, actions, advantages, weights=None) -> LossResult:
    """-sum w * A * log pi(a|s); advantages are treated as constants."""
    return combined_loss(params, arch, states, masks, actions=actions, advantages=advantages,
                         weights=weights, policy_coef=1.0)


def value_loss(params, arch, states, masks, targets, weights=None) -> LossResult:
    """sum w * (v(s) - V)^2 against the search's backed-up values."""
    return combined_loss(params, arch, states, masks, value_targets=targets, weights=weights,
                         value_coef=1.0)


def imitation_loss(params, arch, states, masks, expert_actions, weights=None) -> LossResult:
    """Cross-entropy of the policy against expert actions."""
    return combined_loss(params, arch, states, masks, actions=expert_actions, weights=weights,
                         imitation_coef=1.0)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()}, 0)

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def apply_gradients(params: ModelParams, grads: dict[str, np.ndarray], lr: float,
                    state: AdamState, beta1: float = 0.9, beta2: float = 0.999,
                    eps: float = 1e-8) -> tuple[ModelParams, AdamState, bool]:
    """One Adam step. Returns (params, state, applied); non-finite gradients skip the step."""
    for key, g in grads.items():
        if g.shape != params.arrays[key].shape:
            raise ValueError(f"gradient shape mismatch for {key}")
        if not np.all(np.isfinite(g)):
            log.warning("skipping optimizer step: non-finite gradient in %s", key)
            return params, state, False
    t = state.t + 1
    new_m, new_v, new_p = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for key, a in params.arrays.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(a)
        m = beta1 * state.m[key] + (1.0 - beta1) * g
        v = beta2 * state.v[key] + (1.0 - beta2) * g * g
        new_m[key], new_v[key] = m, v
        new_p[key] = a - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return ModelParams(new_p, params.version + 1), AdamState(new_m, new_v, t), True


def save_checkpoint(path: str | Path, params: ModelParams, arch: ArchConfig, **meta) -> None:
    header = {"format": CHECKPOINT_FORMAT, "arch": arch.to_dict(), "version": params.version, "meta": meta}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **params.arrays)


def load_checkpoint(path: str | Path, arch: ArchConfig | None = None) -> tuple[ModelParams, ArchConfig, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        arrays = {k: data[k].copy() for k in data.files if k != "__header__"}
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"unsupported checkpoint format {header.get('format')}")
    stored = ArchConfig(**header["arch"])
    if arch is not None and arch != stored:
        raise CheckpointMismatch(f"checkpoint architecture {stored} does not match {arch}")
    expected = init_params(stored).arrays
    if set(expected) != set(arrays) or any(expected[k].shape != arrays[k].shape for k in expected):
        raise CheckpointMismatch("checkpoint tensors do not match the architecture header")
    return ModelParams(arrays, int(header["version"])), stored, header.get("meta", {})


def _conv_as_matrix(w: np.ndarray, in_shape: tuple[int, int, int], arch: ArchConfig) -> np.ndarray:
    """Dense (C*H*W, Cout*Ho*Wo) matrix of a bias-free convolution."""
    c, h, wd = in_shape
    d_in = c * h * wd
    basis = np.eye(d_in).reshape(d_in, c, h, wd)
    cols, ho, wo = _im2col(basis, arch.kernel, arch.stride, arch.padding)
    out = (cols @ w.reshape(w.shape[0], -1).T).reshape(d_in, ho, wo, w.shape[0])
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2).reshape(d_in, -1))


# dense conv matrices above this many entries fall back to the batched path
DENSE_LIMIT = 4_000_000


class NetworkEvaluator:
    """Search-facing wrapper: priors over the instance's 6K actions and a value.

    Single-state inference is the hot path of tree search. Inputs are sparse
    binary planes, so when the conv layers are small enough they are folded into
    dense linear maps: the first layer becomes a sum of rows over occupied
    cells, with the impassable and target planes precomputed per instance.
    This path runs in float32.
    """

    def __init__(self, params: ModelParams, arch: ArchConfig, fast: bool | None = None):
        self.params = params
        self.arch = arch
        sizes = arch.spatial_sizes()
        chans = (arch.in_channels, *arch.conv_channels)
        dense = [chans[i] * sizes[i] ** 2 * chans[i + 1] * sizes[i + 1] ** 2
                 for i in range(len(arch.conv_channels))]
        self.fast = max(dense) <= DENSE_LIMIT if fast is None else fast
        self._static: dict[int, tuple[SceneInstance, np.ndarray]] = {}
        if self.fast:
            p = params.arrays
            self._mats, self._biases = [], []
            for i in range(len(arch.conv_channels)):
                mat = _conv_as_matrix(p[f"conv{i}.w"], (chans[i], sizes[i], sizes[i]), arch)
                self._mats.append(mat.astype(np.float32))
                self._biases.append(np.repeat(p[f"conv{i}.b"], sizes[i + 1] ** 2).astype(np.float32))
            self._fc_w = np.concatenate([p["actor_fc.w"], p["critic_fc.w"]]).T.astype(np.float32)
            self._fc_b = np.concatenate([p["actor_fc.b"], p["critic_fc.b"]]).astype(np.float32)
            self._out_w = p["actor_out.w"].astype(np.float32)
            self._out_b = p["actor_out.b"].astype(np.float32)
            self._val_w = p["critic_out.w"][0].astype(np.float32)
            self._val_b = float(p["critic_out.b"][0])
            self._plane = sizes[0] ** 2

    def _static_part(self, inst: SceneInstance) -> np.ndarray:
        hit = self._static.get(id(inst))
        if hit is not None and hit[0] is inst:
            return hit[1]
        n, k_max = inst.grid_size, self.arch.k_max
        idx = [k_max * self._plane + r * n + c for r, c in inst.impassable]
        for k, (obj, pose) in enumerate(zip(inst.objects, inst.target)):
            base = (k_max + 1 + k) * self._plane
            idx.extend(base + r * n + c for r, c in obj.cells(pose))
        part = self._mats[0][idx].sum(axis=0) + self._biases[0]
        if len(self._static) > 4096:
            self._static.clear()
        self._static[id(inst)] = (inst, part)
        return part

    def _fast_logits_value(self, inst: SceneInstance, s: LayoutState) -> tuple[np.ndarray, float]:
        n = inst.grid_size
        idx = []
        for k, (obj, pose) in enumerate(zip(inst.objects, s.poses)):
            base = k * self._plane + pose.row * n + pose.col
            idx.extend(base + dr * n + dc for dr, dc in obj.masks[pose.bin])
        h = self._static_part(inst) + self._mats[0][idx].sum(axis=0)
        np.maximum(h, 0.0, out=h)
        for mat, bias in zip(self._mats[1:], self._biases[1:]):
            h = h @ mat + bias
            np.maximum(h, 0.0, out=h)
        z = h @ self._fc_w + self._fc_b
        np.maximum(z, 0.0, out=z)
        f = self.arch.fc_width
        logits = (self._out_w @ z[:f] + self._out_b).astype(np.float64)
        return logits, float(self._val_w @ z[f:]) + self._val_b

    def __call__(self, inst: SceneInstance, s: LayoutState, mask: Sequence[bool]) -> tuple[np.ndarray, float]:
        if inst.num_objects > self.arch.k_max:
            raise ValueError(f"{inst.num_objects} objects exceed the network capacity of {self.arch.k_max}")
        if inst.grid_size != self.arch.grid_size:
            raise ValueError("instance grid size does not match the network")
        k = len(mask)
        m = np.asarray(mask, dtype=bool)
        if not m.any():
            raise NoFeasibleAction("no feasible action")
        if self.fast:
            logits, value = self._fast_logits_value(inst, s)
            z = np.where(m, logits[:k], -np.inf)
            e = np.exp(z - z.max())
            return e / e.sum(), value
        x = state_planes(inst, s, self.arch.k_max)
        full = padded_mask(mask, self.arch.k_max)
        logits, value, _ = _forward(self.params, self.arch, x)
        return masked_softmax(logits, full[None])[0][:k], float(value[0])


class UniformEvaluator:
    """Uniform priors over feasible actions and a constant value."""

    def __init__(self, value: float = 0.0):
        self.value = value

    def __call__(self, inst: SceneInstance, s: LayoutState, mask: Sequence[bool]) -> tuple[np.ndarray, float]:
        m = np.asarray(mask, dtype=np.float64)
        total = m.sum()
        if total == 0:
            raise NoFeasibleAction("no feasible action")
        return m / total, self.value
