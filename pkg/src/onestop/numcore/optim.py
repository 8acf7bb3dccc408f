"""Adam with a linear learning-rate warmup."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    base_lr: float = 1e-4
    warmup_ratio: float = 0.05
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_ratio * self.total_steps)

    def lr_at(self, step: int) -> float:
        """Learning rate used for the ``step``-th update (1-based)."""
        w = self.warmup_steps
        if w == 0 or step >= w:
            return self.base_lr
        return self.base_lr * step / w

    def config(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "warmup_ratio": self.warmup_ratio,
            "total_steps": self.total_steps,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "step_count": self.step_count,
        }


def adam_step(params: dict[str, Tensor], state: OptimizerState, lr: float | None = None) -> float:
    """Apply one bias-corrected Adam update in place; returns the learning rate used.

    Parameters without a gradient are treated as having a zero gradient.
    ``lr`` overrides the warmup schedule (used by tests).
    """
    state.step_count += 1
    t = state.step_count
    if lr is None:
        lr = state.lr_at(t)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - lr * update).astype(p.dtype, copy=False)
    return lr


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm
