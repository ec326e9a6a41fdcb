"""Adam with bias correction over a :class:`ParameterStore`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParameterStore


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray], lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              state: AdamState | None = None, frozen=()) -> AdamState:
    """Apply one Adam update in place and return the advanced moment state."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    state = state if state is not None else AdamState()
    state.step += 1
    t = state.step
    for path, p in store.items():
        if path in frozen or any(path.startswith(f + "/") for f in frozen):
            continue
        g = grads.get(path)
        if g is None:
            continue
        m = state.m.get(path)
        v = state.v.get(path)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if m.shape != p.shape:
            raise ValueError(f"{path}: moment shape {m.shape} != parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[path], state.v[path] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class Adam:
    def __init__(self, store: ParameterStore, lr: float = 1e-2,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, frozen=()):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.store = store
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.frozen = tuple(frozen)
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.store, self.store.grads(), self.lr, self.betas, self.eps,
                  self.state, self.frozen)
