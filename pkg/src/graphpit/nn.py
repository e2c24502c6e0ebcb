"""Small building blocks shared by the aggregator, the edge MLP and the prior."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .optim import ParamStore
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def add_linear(store: ParamStore, name: str, fan_in: int, fan_out: int,
               rng: np.random.Generator, bias: bool = True) -> None:
    store.add(f"{name}.W", uniform_init(rng, fan_in, (fan_in, fan_out)))
    if bias:
        store.add(f"{name}.b", uniform_init(rng, fan_in, (fan_out,)))


def add_mlp(store: ParamStore, name: str, fan_in: int, hidden: int, fan_out: int,
            rng: np.random.Generator) -> None:
    add_linear(store, f"{name}.fc1", fan_in, hidden, rng)
    add_linear(store, f"{name}.fc2", hidden, fan_out, rng)


def add_layer_norm(store: ParamStore, name: str, dim: int) -> None:
    store.add(f"{name}.gain", np.ones(dim))
    store.add(f"{name}.bias", np.zeros(dim))


def linear(x: Tensor, store: ParamStore, name: str) -> Tensor:
    y = T.matmul(x, store[f"{name}.W"])
    if f"{name}.b" in store:
        y = T.add(y, store[f"{name}.b"])
    return y


def mlp(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return linear(T.relu(linear(x, store, f"{name}.fc1")), store, f"{name}.fc2")


def layer_norm(x: Tensor, store: ParamStore, name: str, eps: float = 1e-5) -> Tensor:
    return T.layer_norm(x, store[f"{name}.gain"], store[f"{name}.bias"], eps)
