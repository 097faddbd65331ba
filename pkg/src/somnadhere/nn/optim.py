"""AdamW and the warmup-cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import ModelWeights


@dataclass
class OptimizerState:
    lr_base: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Optional[ModelWeights] = field(default=None, repr=False)
    v: Optional[ModelWeights] = field(default=None, repr=False)
    # parameter-name prefixes the optimizer may touch; None means all
    trainable: Optional[tuple] = None

    def init(self, weights: ModelWeights) -> "OptimizerState":
        self.m = weights.zeros_like()
        self.v = weights.zeros_like()
        return self

    def owns(self, name: str) -> bool:
        return self.trainable is None or name.startswith(self.trainable)


def adamw_step(weights: ModelWeights, grads: ModelWeights, state: OptimizerState,
               lr: Optional[float] = None) -> tuple:
    """One decoupled-weight-decay Adam update, in place; returns ``(weights, state)``.

    ``w <- w * (1 - lr * wd)`` then ``w <- w - lr * m_hat / (sqrt(v_hat) + eps)``.
    Parameters outside ``state.trainable`` are left bit-identical.
    """
    if state.m is None:
        state.init(weights)
    lr = state.lr_base if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for k, w in weights.items():
        if not state.owns(k):
            continue
        g = grads[k]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != weight shape {w.shape} for {k}")
        dt = w.dtype.type
        m, v = state.m[k], state.v[k]
        m *= dt(state.beta1)
        m += dt(1.0 - state.beta1) * g
        v *= dt(state.beta2)
        v += dt(1.0 - state.beta2) * g * g
        w *= dt(1.0 - lr * state.weight_decay)
        w -= dt(lr / bc1) * m / (np.sqrt(v / dt(bc2)) + dt(state.eps))
    return weights, state


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr_base: float) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= warmup_steps < total_steps:
        raise ValueError("need 0 <= warmup_steps < total_steps")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return lr_base * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_base * 0.5 * (1.0 + math.cos(math.pi * progress))
