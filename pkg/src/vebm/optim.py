"""Adam with bias correction, over dicts of named float32 arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, maximize=False, lr=None):
    """One Adam update; returns ``(new_params, new_state)`` without mutating inputs.

    With ``maximize`` the parameters climb ``grads`` (the descriptor passes
    the log-likelihood gradient this way); otherwise they descend.
    """
    lr = state.lr if lr is None else lr
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
        dt = p.dtype
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = (b1 * m + (1 - b1) * g).astype(dt)
        v = (b2 * v + (1 - b2) * g * g).astype(dt)
        step = (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(dt)
        new_params[name] = p + step if maximize else p - step
        new_m[name], new_v[name] = m, v
    for name in state.m:
        new_m.setdefault(name, state.m[name])
        new_v.setdefault(name, state.v[name])
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return new_params, new_state
