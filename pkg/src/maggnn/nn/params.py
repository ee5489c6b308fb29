"""Named parameter storage and the Adam optimiser."""
from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from ..errors import ShapeError
from .autodiff import Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class ParamStore:
    """Ordered mapping of parameter name to trainable leaf tensor."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: set[str] = set()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        """Register a tensor; non-trainable ones are buffers (e.g. running statistics)."""
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self._params[name] = t
        if trainable:
            self._trainable.add(name)
        self.m[name] = np.zeros_like(t.value)
        self.v[name] = np.zeros_like(t.value)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def trainable_items(self):
        return [(k, t) for k, t in self._params.items() if k in self._trainable]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.value) if t.grad is None else t.grad)
                for k, t in self.trainable_items()}

    def num_values(self) -> int:
        return sum(t.value.size for t in self._params.values())

    def layout(self) -> list[dict]:
        out, off = [], 0
        for k, t in self._params.items():
            out.append({"name": k, "shape": list(t.value.shape), "offset": off})
            off += t.value.size
        return out

    def flat(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.value.reshape(-1) for t in self._params.values()])

    def load_flat(self, flat: np.ndarray, layout: list[dict] | None = None) -> None:
        expected = self.layout()
        if layout is not None:
            mine = [(d["name"], list(d["shape"])) for d in expected]
            theirs = [(d["name"], list(d["shape"])) for d in layout]
            if mine != theirs:
                raise ShapeError("parameter layout does not match")
        if flat.size != self.num_values():
            raise ShapeError(f"expected {self.num_values()} values, got {flat.size}")
        for d in expected:
            t = self._params[d["name"]]
            t.value = flat[d["offset"]: d["offset"] + t.value.size].reshape(t.value.shape).copy()

    def copy_from(self, other: "ParamStore") -> None:
        """Overwrite values (not moments) with those of a shape-congruent store."""
        if [(k, t.shape) for k, t in self.items()] != [(k, t.shape) for k, t in other.items()]:
            raise ShapeError("parameter stores are not shape-congruent")
        for k, t in other.items():
            self._params[k].value = t.value.copy()

    def checksum(self) -> str:
        return hashlib.sha256(self.flat().tobytes()).hexdigest()


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self) -> None:
        """One Adam update from the accumulated gradients, then clear them."""
        st = self.store
        st.step_count += 1
        t = st.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for k, p in st.trainable_items():
            if p.grad is None:
                g = np.zeros_like(p.value)
            else:
                g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            st.m[k] = self.b1 * st.m[k] + (1 - self.b1) * g
            st.v[k] = self.b2 * st.v[k] + (1 - self.b2) * g * g
            mhat = st.m[k] / c1
            vhat = st.v[k] / c2
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        st.zero_grad()


def adam_step(store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    Adam(store, lr, betas, eps).step()
