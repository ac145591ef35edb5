"""AdamW with decoupled weight decay and global-norm gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def reset(self) -> None:
        self.m.clear()
        self.v.clear()
        self.t = 0


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict, max_norm: float | None) -> tuple[dict, float]:
    """Scale all gradients by max_norm / norm when norm exceeds max_norm."""
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float,
                   betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
                   grad_clip: float | None = 1.0) -> float:
    """One descent step on ``params`` (in place) along ``grads``; returns the pre-clip norm.

    Only keys present in ``grads`` are touched.
    """
    grads, norm = clip_by_global_norm(grads, grad_clip)
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k in sorted(grads):
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p = params[k]
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return norm
