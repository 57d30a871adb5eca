"""Adam optimizer and the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params, beta1=0.9, beta2=0.999, eps=1e-8):
    state = AdamState(beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params, state: AdamState, lr):
    """One bias-corrected Adam update in place; parameters without a gradient
    buffer are treated as zero-gradient."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def lr_schedule(epoch, initial_lr, halving_period):
    """initial_lr halved after every ``halving_period`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return initial_lr * 0.5 ** (epoch // halving_period)
