"""AdamW with decoupled weight decay, gradient clipping, and the warmup +
cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from pointar.nncore.tensor import ParameterSet

__all__ = ["OptimizerState", "adamw_step", "clip_global_norm", "LRSchedule", "cosine_lr"]


@dataclass
class OptimizerState:
    """First/second moment accumulators keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterSet, weight_decay: float = 0.05) -> "OptimizerState":
        state = cls(weight_decay=weight_decay)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adamw_step(params: ParameterSet, state: OptimizerState, lr: float) -> None:
    """One decoupled-weight-decay Adam update.

    Weight decay is applied multiplicatively before the adaptive step;
    parameters with a missing gradient buffer are treated as zero-grad
    (they still decay).
    """
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if state.weight_decay != 0.0:
            p.data *= 1.0 - lr * state.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)


def clip_global_norm(params: ParameterSet, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass(frozen=True)
class LRSchedule:
    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.base_lr < 0.0:
            raise ValueError("base_lr must be nonnegative")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


def cosine_lr(step: int, schedule: LRSchedule) -> float:
    """Linear warmup to base_lr, then half-cosine decay to zero."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / span if span > 0 else 1.0
    return 0.5 * schedule.base_lr * (1.0 + math.cos(math.pi * progress))
