"""Adam with decoupled weight decay, global-norm clipping and a linear schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up from 0 to ``peak_lr``, then linear decay to 0 at ``max_steps``."""

    peak_lr: float
    warmup_steps: int
    max_steps: int

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.max_steps:
            raise ValueError(f"need 0 < warmup_steps < max_steps, got {self.warmup_steps}, {self.max_steps}")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")

    @classmethod
    def from_ratio(cls, peak_lr: float, max_steps: int, warmup_ratio: float = 0.01) -> "LrSchedule":
        return cls(peak_lr, max(1, round(warmup_ratio * max_steps)), max_steps)


def lr_at(step: int, sched: LrSchedule) -> float:
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step >= sched.max_steps:
        return 0.0
    if step <= sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    return sched.peak_lr * (sched.max_steps - step) / (sched.max_steps - sched.warmup_steps)


_NO_DECAY = frozenset({"gain", "bias", "bq", "bk", "bv", "bo", "b_in", "b_out"})


def decays(name: str) -> bool:
    """Weight decay skips biases, norm parameters and the relative-position bias."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in _NO_DECAY and "relative_bias" not in name


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def adam_update(named_params, state: OptimizerState, lr: float) -> float:
    """One clipped, bias-corrected Adam step. Returns the pre-clip gradient norm.

    Parameters without a gradient are treated as having a zero gradient.
    """
    grads = {name: (np.zeros_like(t.data) if t.grad is None else t.grad) for name, t in named_params}
    norm = clip_grad_norm(grads, state.clip_norm) if state.clip_norm else 0.0
    state.step += 1
    t_ = state.step
    c1 = 1.0 - state.beta1**t_
    c2 = 1.0 - state.beta2**t_
    for name, param in named_params:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and decays(name):
            update = update + state.weight_decay * param.data
        param.data -= lr * update
    return norm
