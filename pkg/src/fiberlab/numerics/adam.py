"""Adaptive-moment gradient updates, functional style."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One update; returns (new params as Tensors, same state advanced).

    Moments are kept per parameter and lazily initialized to zero on first use.
    """
    arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
    gs = [g.data if isinstance(g, Tensor) else np.asarray(g) for g in grads]
    if len(arrays) != len(gs):
        raise ValueError("params and grads length mismatch")
    for p, g in zip(arrays, gs):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient passed to adam_step")
    if not state.m:
        state.m = [np.zeros_like(p) for p in arrays]
        state.v = [np.zeros_like(p) for p in arrays]
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    out = []
    for i, (p, g) in enumerate(zip(arrays, gs)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        mhat = state.m[i] / b1c
        vhat = state.v[i] / b2c
        out.append(Tensor(p - state.lr * mhat / (np.sqrt(vhat) + state.eps),
                          requires_grad=True))
    return out, state
