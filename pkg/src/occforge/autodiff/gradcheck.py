"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .params import ParameterStore
from .tensor import Tape, Tensor, backward, no_grad


@dataclass
class ParamCheck:
    path: str
    max_error: float
    checked: int
    ok: bool


def gradient_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """Relative error, falling back to absolute when both sides are below ``floor``."""
    scale = max(abs(analytic), abs(numeric))
    diff = abs(analytic - numeric)
    return diff / scale if scale > floor else diff


def grad_check(f: Callable[[ParameterStore], Tensor], store: ParameterStore,
               step: float = 1e-5, tol: float = 1e-4, max_entries: int | None = None,
               seed: int = 0, floor: float = 1e-6) -> dict[str, ParamCheck]:
    """Compare tape gradients of ``f(store)`` against central differences.

    With ``max_entries`` set, each parameter is probed at that many entries
    (chosen by a seeded RNG, always including the largest analytic entry).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    with Tape() as tape:
        out = f(store)
    store.zero_grad()
    backward(out, tape)
    analytic = store.grads()
    rng = np.random.default_rng(seed)
    report = {}
    for path, p in store.items():
        g = analytic[path]
        n = p.size
        if max_entries is None or max_entries >= n:
            entries = np.arange(n)
        else:
            entries = rng.choice(n, size=max_entries, replace=False)
            entries = np.unique(np.append(entries, np.argmax(np.abs(g))))
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in entries:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = f(store).item()
                flat[i] = orig - step
                fm = f(store).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            worst = max(worst, gradient_error(g.reshape(-1)[i], numeric, floor))
        report[path] = ParamCheck(path, worst, len(entries), worst < tol)
    return report


def check_function(f: Callable[..., Tensor], inputs: list[np.ndarray], step: float = 1e-5,
                   floor: float = 1e-6) -> float:
    """Max gradient error of scalar ``f(*tensors)`` w.r.t. every input entry."""
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = f(*tensors)
    backward(out, tape)
    worst = 0.0
    for t in tensors:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = f(*tensors).item()
                flat[i] = orig - step
                fm = f(*tensors).item()
            flat[i] = orig
            worst = max(worst, gradient_error(g.reshape(-1)[i], (fp - fm) / (2 * step), floor))
    return worst
