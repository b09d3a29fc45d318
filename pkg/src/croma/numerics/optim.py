"""AdamW with decoupled weight decay and the warmup + cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # names listed here skip weight decay (biases, norms, temperature)
    no_decay: frozenset = frozenset()


def adamw_step(
    state: OptimizerState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float,
) -> dict[str, Tensor]:
    """One AdamW update. Returns fresh leaf tensors; ``state`` is advanced in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {params[name].shape} for {name!r}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if name not in state.no_decay:
            update = update + state.weight_decay * p.data
        out[name] = Tensor(p.data - lr * update, requires_grad=p.requires_grad, name=name)
    return out


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_frac: float
    total_steps: int

    @property
    def warmup_steps(self) -> int:
        if self.warmup_frac <= 0 or self.total_steps <= 0:
            return 0
        return min(self.total_steps, max(1, round(self.warmup_frac * self.total_steps)))


def lr_at(schedule: LrSchedule, step: float) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to 0 at total_steps."""
    total = schedule.total_steps
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = schedule.warmup_steps
    if warm > 0 and step < warm:
        return schedule.base_lr * step / warm
    if total == warm:
        return schedule.base_lr
    progress = (step - warm) / (total - warm)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
