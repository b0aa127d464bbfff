"""Small neural-net building blocks on top of the autograd engine."""

from __future__ import annotations

import hashlib

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def rng_for(name: str, seed: int) -> np.random.Generator:
    """Independent seeded stream per parameter name.

    Derived by hashing (seed, name) so adding or reordering parameters never
    shifts another parameter's initialization.
    """
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))


class Parameter(Tensor):
    """A named leaf tensor that always requires grad."""

    def __init__(self, values, name: str):
        super().__init__(values, requires_grad=True, name=name)


def xavier_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Module:
    """Minimal container: children and parameters discovered by attribute."""

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        seen: set[int] = set()
        for value in vars(self).values():
            for p in _collect(value):
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        return params


def _collect(value):
    if isinstance(value, Parameter):
        yield value
    elif isinstance(value, Module):
        yield from value.parameters()
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _collect(item)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, name: str, seed: int,
                 bias: bool = True):
        self.weight = Parameter(xavier_uniform((d_in, d_out),
                                               rng_for(f"{name}.weight", seed)),
                                name=f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32),
                              name=f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ag.matmul(x, self.weight)
        if self.bias is not None:
            out = ag.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, name: str):
        self.gain = Parameter(np.ones(dim, dtype=np.float32),
                              name=f"{name}.gain")
        self.bias = Parameter(np.zeros(dim, dtype=np.float32),
                              name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, n_rows: int, dim: int, name: str, seed: int):
        rng = rng_for(f"{name}.weight", seed)
        init = (rng.standard_normal((n_rows, dim)) / np.sqrt(dim)).astype(np.float32)
        self.weight = Parameter(init, name=f"{name}.weight")

    def __call__(self, idx) -> Tensor:
        return ag.gather_rows(self.weight, idx)


class MLP(Module):
    """Dense stack with ReLU between layers, linear output."""

    def __init__(self, dims, name: str, seed: int):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.layers = [Linear(dims[i], dims[i + 1], f"{name}.fc{i}", seed)
                       for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ag.relu(x)
        return x
