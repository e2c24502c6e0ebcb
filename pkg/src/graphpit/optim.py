"""Named parameter store and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    params: dict[str, Tensor] = field(default_factory=dict)
    state: dict[str, AdamState] = field(default_factory=dict)

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def prefixed(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in self.params.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if self.params[name].shape != arr.shape:
                raise ShapeError(f"{name}: expected {self.params[name].shape}, got {arr.shape}")
            self.params[name].data = np.array(arr, dtype=np.float64)


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update, in place. Returns ``store``."""
    for name, g in grads.items():
        p = store.params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        st = store.state.get(name)
        if st is None:
            st = store.state[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        st.step += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * g * g
        m_hat = st.m / (1.0 - beta1 ** st.step)
        v_hat = st.v / (1.0 - beta2 ** st.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store
