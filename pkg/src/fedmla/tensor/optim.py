"""Adam with bias correction over named float64 arrays."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .core import ShapeError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState, lr: float) -> Dict[str, np.ndarray]:
    """Apply one Adam update to ``params`` in place and return it.

    Parameters missing from ``grads`` are treated as having zero gradient so
    their moments still decay.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"adam_step: grad for {name!r} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
