"""Adam with bias correction over dicts of parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One Adam update; returns new parameter and state objects (inputs untouched).

    Raises:
        ShapeMismatch: if a gradient or moment does not match its parameter.
    """
    if set(grads) != set(params):
        raise ShapeMismatch("gradient names do not match parameter names")
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {w.shape}")
        m = state.m.get(name, np.zeros_like(w))
        v = state.v.get(name, np.zeros_like(w))
        if m.shape != w.shape or v.shape != w.shape:
            raise ShapeMismatch(f"{name}: optimizer state does not match parameter shape")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p[name] = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)
