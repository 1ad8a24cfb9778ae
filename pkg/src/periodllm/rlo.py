"""Channel-weighted gradient updates (RLO) on top of SGD or Adam.

Channels whose mean statistic falls below the threshold have their gradient
rows scaled by 1 + beta * exp(iter_num / max_iter); all other rows are left
bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

THRESHOLD_MODES = ("mean", "median")
STAT_SOURCES = ("grad_abs_mean", "activation_abs_mean")
ITER_SCOPES = ("per_stage", "global")

# tensor name -> channel axis; w_out is (d, V), so rows are the hidden channels feeding logits
DEFAULT_TARGET = "w_out:0"


class RloError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class RloConfig:
    enabled: bool = False
    beta: float = 0.05
    max_iter: int = 1
    threshold_mode: str = "mean"
    stat_source: str = "grad_abs_mean"
    iter_scope: str = "per_stage"
    target: str = DEFAULT_TARGET

    def __post_init__(self):
        if not self.beta > 0:
            raise RloError(f"rlo.beta must be > 0, got {self.beta}")
        if self.max_iter < 1:
            raise RloError(f"rlo.max_iter must be >= 1, got {self.max_iter}")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise RloError(f"rlo.threshold_mode must be one of {THRESHOLD_MODES}")
        if self.stat_source not in STAT_SOURCES:
            raise RloError(f"rlo.stat_source must be one of {STAT_SOURCES}")
        if self.iter_scope not in ITER_SCOPES:
            raise RloError(f"rlo.iter_scope must be one of {ITER_SCOPES}")
        parse_target(self.target)

    def targets(self) -> list[tuple[str, int]]:
        return parse_target(self.target)


def parse_target(spec: str) -> list[tuple[str, int]]:
    """'w_out:0,h1.w2:1' -> [('w_out', 0), ('h1.w2', 1)]."""
    out = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, axis = part.partition(":")
        if axis not in ("", "0", "1"):
            raise RloError(f"bad channel axis in rlo.target entry {part!r}")
        out.append((name, int(axis or 0)))
    if not out:
        raise RloError("rlo.target names no tensors")
    return out


@dataclass
class ChannelStats:
    per_channel_mean: np.ndarray
    global_mean: float


def channel_stats(values: np.ndarray, axis: int = 0) -> ChannelStats:
    """Mean |value| per channel along ``axis`` (channels x width), and their mean."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise RloError("channel_stats on an empty tensor")
    if values.ndim == 1:
        values = values[:, None]
    per = np.abs(np.moveaxis(values, axis, 0)).reshape(values.shape[axis], -1).mean(axis=1)
    return ChannelStats(per_channel_mean=per, global_mean=float(per.mean()))


def omega(stats: ChannelStats, iter_num: int, cfg: RloConfig) -> np.ndarray:
    if not 0 <= iter_num <= cfg.max_iter:
        raise RloError(f"iter_num {iter_num} outside [0, {cfg.max_iter}]")
    per = stats.per_channel_mean
    if cfg.threshold_mode == "mean":
        threshold = stats.global_mean
    else:
        threshold = float(np.median(per))
    boost = 1.0 + cfg.beta * math.exp(iter_num / cfg.max_iter)
    return np.where(per < threshold, boost, 1.0)


def apply_rlo(grads: dict[str, np.ndarray], weights: np.ndarray, cfg: RloConfig) -> dict[str, np.ndarray]:
    """Scale channel slices of the targeted tensors; everything else passes through."""
    if not cfg.enabled:
        return grads
    weights = np.asarray(weights, dtype=np.float64)
    out = dict(grads)
    for name, axis in cfg.targets():
        if name not in grads:
            raise RloError(f"rlo.target tensor {name!r} not among gradients")
        g = grads[name]
        if g.shape[axis] != weights.size:
            raise RloError(f"{name}: channel dim {g.shape[axis]} != {weights.size} weights")
        shape = [1] * g.ndim
        shape[axis] = weights.size
        out[name] = g * weights.reshape(shape)
    return out


def rlo_weights(grads, activations, iter_num: int, cfg: RloConfig) -> np.ndarray:
    """Channel weights from the configured statistic of the first target tensor."""
    name, axis = cfg.targets()[0]
    if cfg.stat_source == "grad_abs_mean":
        stats = channel_stats(grads[name], axis)
    else:
        if activations is None:
            raise RloError("activation_abs_mean needs the final hidden activations")
        acts = np.asarray(activations)
        stats = channel_stats(acts.reshape(-1, acts.shape[-1]), axis=1)
    return omega(stats, iter_num, cfg)


# -------------------------- host update rules --------------------------


@dataclass
class OptimState:
    lr: float = 0.001
    kind: str = "adam"  # adam | sgd
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise RloError(f"unknown optimizer {self.kind!r}")


def check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in tensor {name!r}")


def step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> dict[str, np.ndarray]:
    """One update; params are modified in place and also returned."""
    check_finite(grads)
    state.step += 1
    if state.kind == "sgd":
        for k, g in grads.items():
            params[k] -= state.lr * g
        return params
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        _adam_kernel(
            params[k].reshape(-1),
            np.ascontiguousarray(g, dtype=params[k].dtype).reshape(-1),
            state.m[k].reshape(-1),
            state.v[k].reshape(-1),
            state.lr, b1, b2, bc1, bc2, state.eps,
        )
    return params


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, lr, b1, b2, bc1, bc2, eps):
    # single fused pass over the textbook update (may differ from numpy in the last ulp)
    for i in range(p.size):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * (gi * gi)
        p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)
