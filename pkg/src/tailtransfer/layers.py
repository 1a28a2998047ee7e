"""Parameter containers built on gradcore."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import gradcore as gc
from .gradcore import Value

ACTIVATIONS: dict[str, Callable[[Value], Value]] = {
    "tanh": gc.tanh,
    "sigmoid": gc.sigmoid,
    "relu": gc.relu,
}


class Module:
    """Anything exposing named parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Value]]:
        for name, attr in vars(self).items():
            if isinstance(attr, Value) and attr.requires_grad:
                yield prefix + name, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(f"{prefix}{name}.")
            elif isinstance(attr, (list, tuple)):
                for k, sub in enumerate(attr):
                    if isinstance(sub, Module):
                        yield from sub.named_parameters(f"{prefix}{name}.{k}.")

    def parameters(self) -> list[Value]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 scale: float | None = None):
        if rng is None or scale == 0.0:
            w = np.zeros((n_out, n_in))
        else:
            w = rng.normal(0.0, scale if scale is not None else 1.0 / np.sqrt(n_in), size=(n_out, n_in))
        self.W = Value(w, requires_grad=True)
        self.b = Value(np.zeros(n_out), requires_grad=True)

    def __call__(self, x) -> Value:
        return gc.dense_affine(x, self.W, self.b)

    def numpy(self, x: np.ndarray) -> np.ndarray:
        return x @ self.W.data.T + self.b.data


class MLP(Module):
    """Dense layers with ``activation`` between them and an optional final one."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, activation: str = "tanh",
                 final: str | None = None, zero_last: bool = False):
        self.layers = [Dense(a, b, rng, scale=0.0 if zero_last and k == len(sizes) - 2 else None)
                       for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.activation = activation
        self.final = final

    def __call__(self, x) -> Value:
        act = ACTIVATIONS[self.activation]
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = act(x)
        return ACTIVATIONS[self.final](x) if self.final else x

    def numpy(self, x: np.ndarray) -> np.ndarray:
        return self(Value(x)).data
