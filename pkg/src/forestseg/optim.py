"""ADAM updates with bias-corrected moment estimates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingDivergence(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        shapes = [np.asarray(getattr(p, "data", p)) for p in params]
        return cls(
            m=[np.zeros_like(a, dtype=np.float32) for a in shapes],
            v=[np.zeros_like(a, dtype=np.float32) for a in shapes],
            **hyper,
        )


def adam_step(state: AdamState, params, grads) -> None:
    """Update ``params`` (arrays or Tensors) in place and advance ``state``.

    Nothing is modified if any gradient is non-finite.
    """
    params = [p if isinstance(p, np.ndarray) else p.data for p in params]
    grads = [np.asarray(g) for g in grads]
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("parameter, gradient and moment lists differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient for parameter {i}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(m.dtype, copy=False)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
