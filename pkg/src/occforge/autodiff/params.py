"""Named parameter storage with path-keyed deterministic initialization."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .tensor import Tensor


def _path_rng(path: str, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def init_array(path: str, shape, seed: int, init="kaiming",
               fan_in: int | None = None, value: float = 0.0) -> np.ndarray:
    """Initial values for one parameter; a pure function of its arguments.

    ``kaiming`` draws U(-b, b) with b = sqrt(6 / fan_in); fan_in defaults
    to the product of all but the leading extent. ``init`` may also be a
    callable taking the shape.
    """
    shape = tuple(int(s) for s in shape)
    if callable(init):
        arr = np.array(init(shape), dtype=np.float64)
        if arr.shape != shape:
            raise ValueError(f"{path}: initializer returned {arr.shape}, expected {shape}")
        return arr
    if init == "zeros":
        return np.zeros(shape)
    if init == "constant":
        return np.full(shape, float(value))
    if init == "kaiming":
        if fan_in is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        bound = np.sqrt(6.0 / max(fan_in, 1))
        return _path_rng(path, seed).uniform(-bound, bound, size=shape)
    if init == "normal":
        return _path_rng(path, seed).normal(0.0, float(value) or 1.0, size=shape)
    raise ValueError(f"unknown init {init!r}")


class ParameterStore:
    """Map from parameter path to trainable :class:`Tensor`.

    Parameters are created on first request through :meth:`param`; asking
    again for the same path returns the existing tensor.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def param(self, path: str, shape, init="kaiming",
              fan_in: int | None = None, value: float = 0.0) -> Tensor:
        shape = tuple(int(s) for s in shape)
        existing = self._params.get(path)
        if existing is not None:
            if existing.shape != shape:
                raise ValueError(f"{path}: requested shape {shape}, stored {existing.shape}")
            return existing
        t = Tensor(init_array(path, shape, self.seed, init, fan_in, value),
                   requires_grad=True, name=path)
        self._params[path] = t
        return t

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self, prefix)

    def add(self, path: str, data) -> Tensor:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(data, requires_grad=True, name=path)
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return [(k, self._params[k]) for k in sorted(self._params)]

    def names(self) -> list[str]:
        return sorted(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for k, v in state.items():
            if k in self._params:
                if self._params[k].shape != v.shape:
                    raise ValueError(f"{k}: shape {v.shape} != {self._params[k].shape}")
                self._params[k].data = np.array(v, dtype=np.float64)
            elif strict:
                raise KeyError(k)
            else:
                self.add(k, v)

    def copy(self) -> "ParameterStore":
        other = ParameterStore(self.seed)
        for k, t in self.items():
            other.add(k, t.data.copy())
        return other

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._params.values()))


class ParamScope:
    """A prefix view into a :class:`ParameterStore`."""

    def __init__(self, store: ParameterStore, prefix: str):
        self.store = store
        self.prefix = prefix.rstrip("/")

    def path(self, name: str) -> str:
        return f"{self.prefix}/{name}" if self.prefix else name

    def param(self, name: str, shape, init="kaiming",
              fan_in: int | None = None, value: float = 0.0) -> Tensor:
        return self.store.param(self.path(name), shape, init, fan_in, value)

    def scope(self, name: str) -> "ParamScope":
        return ParamScope(self.store, self.path(name))

    def __getitem__(self, name: str) -> Tensor:
        return self.store[self.path(name)]

    def __contains__(self, name: str) -> bool:
        return self.path(name) in self.store
