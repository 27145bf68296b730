"""SGD with momentum and weight decay, plus the polynomial LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class LrSchedule:
    lr_init: float
    total_steps: int
    power: float = 0.9

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if self.lr_init < 0:
            raise ValueError("lr_init must be non-negative")


def poly_lr(step: int, schedule: LrSchedule) -> float:
    """lr_init * (1 - step/T) ** power; steps past T give 0."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step >= schedule.total_steps:
        return 0.0
    return schedule.lr_init * (1.0 - step / schedule.total_steps) ** schedule.power


@dataclass
class OptimizerState:
    buffers: list[np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr: float = 0.0
    steps: int = 0
    lr_history: list[float] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], momentum: float = 0.9, weight_decay: float = 1e-4):
        return cls([np.zeros_like(p.data) for p in params], momentum, weight_decay)

    def set_lr(self, lr: float) -> None:
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.lr_history and lr > self.lr_history[-1]:
            raise ValueError(f"learning rate increased from {self.lr_history[-1]} to {lr}")
        self.lr = lr


def sgd_step(params: list[Tensor], grads: list[np.ndarray | None], state: OptimizerState) -> None:
    """g' = g + wd*p ; v <- m*v + g' ; p <- p - lr*v.

    Parameters are rebound to fresh arrays, so earlier snapshots stay valid.
    A missing gradient counts as zero (weight decay still applies).
    """
    if not (len(params) == len(grads) == len(state.buffers)):
        raise ValueError("params, grads and momentum buffers differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.buffers[i].shape != p.shape:
            raise ValueError(f"shape mismatch at parameter {i}: {p.shape}, {g.shape}, {state.buffers[i].shape}")
        g = g + state.weight_decay * p.data
        v = state.momentum * state.buffers[i] + g
        state.buffers[i] = v
        p.data = p.data - state.lr * v
    state.lr_history.append(state.lr)
    state.steps += 1
