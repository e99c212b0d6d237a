"""SGD with momentum, Adam, cosine annealing and early stopping.

Optimizers update the parameter arrays in ``params`` in place; the caller
owns both the parameters and the optimizer exclusively while stepping.
Weight decay is coupled L2: ``weight_decay * theta`` is added to the
gradient before the momentum or moment updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    slots: dict = field(default_factory=dict)


def _check(params, grads):
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        if grads[name].shape != p.shape:
            raise ValueError(f"{name}: gradient shape {grads[name].shape} != parameter shape {p.shape}")


def sgd_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """``v <- mu v + (g + wd theta)``, ``theta <- theta - lr v``."""
    _check(params, grads)
    state.step += 1
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        v = state.slots.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = state.momentum * v + g
        state.slots[name] = v
        p -= state.lr * v
    return params


def adam_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """Bias-corrected Adam."""
    _check(params, grads)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        m, v = state.slots.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.slots[name] = (m, v)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class SGD:
    def __init__(self, lr=0.1, momentum=0.9, weight_decay=0.0):
        self.state = OptimizerState(lr=lr, momentum=momentum, weight_decay=weight_decay)

    def step(self, params, grads):
        return sgd_step(params, grads, self.state)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value


class Adam(SGD):
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)

    def step(self, params, grads):
        return adam_step(params, grads, self.state)


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    total_epochs: int
    min_lr: float = 0.0
    kind: str = "cosine"


def cosine_lr(epoch: float, schedule: Schedule) -> float:
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if schedule.total_epochs == 0:
        return schedule.base_lr
    lo, hi = schedule.min_lr, schedule.base_lr
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * epoch / schedule.total_epochs))


class EarlyStopping:
    """Signals a stop after ``patience`` consecutive epochs without improvement."""

    def __init__(self, patience: int = 10, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.counter = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; returns True when training should stop."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.counter = 0
        else:
            self.counter += 1
        return self.counter >= self.patience
