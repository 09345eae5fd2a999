"""AdamW with decoupled weight decay and the linear-decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, UsageError


def linear_decay_schedule(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps)


def constant_schedule(step: int, total_steps: int, base_lr: float) -> float:
    return base_lr


SCHEDULES = {"linear_decay": linear_decay_schedule, "constant": constant_schedule}


@dataclass
class OptimizerState:
    lr: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Sequence[Tensor], state: OptimizerState, lr_now: float | None = None) -> None:
    """One AdamW update over ``params``.

    Tensors with ``trainable=False`` are skipped entirely. Moments are keyed by
    tensor identity, so a subset of the parameters may be stepped (as the
    multi-task trainer does); the step counter is shared.
    """
    lr = state.lr if lr_now is None else lr_now
    active = [p for p in params if p.trainable]
    for p in active:
        if p.grad is None:
            raise UsageError(f"trainable parameter {p.name or p!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in active:
        k = id(p)
        g = p.grad
        m = state.m.get(k)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[k]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data = p.data - lr * update
