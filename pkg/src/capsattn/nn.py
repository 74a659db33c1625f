"""Parameter containers and the few layers the transformer needs."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that is trained.

    ``split_axes`` leading axes are unrolled into separate checkpoint entries
    (``name.i`` or ``name.i.j``); the array itself stays stacked so the
    forward pass can use one batched matmul.
    """

    __slots__ = ("split_axes",)

    def __init__(self, data, split_axes: int = 0, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype or T.get_default_dtype())
        self.split_axes = split_axes


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self._children.items():
            yield from child.named_modules(prefix + name + ".")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """Children named ``1..N``."""

    def __init__(self, modules):
        super().__init__()
        for i, m in enumerate(modules, start=1):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._children.values())

    def __len__(self):
        return len(self._children)

    def __getitem__(self, i: int) -> Module:
        """1-based lookup, matching layer numbering."""
        return self._children[str(i)]


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class FeedForward(Module):
    """max(0, x W1 + b1) W2 + b2"""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.w1 = Parameter(xavier_uniform(rng, (d_model, d_ff), d_model, d_ff))
        self.b1 = Parameter(np.zeros(d_ff))
        self.w2 = Parameter(xavier_uniform(rng, (d_ff, d_model), d_ff, d_model))
        self.b2 = Parameter(np.zeros(d_model))

    def forward(self, x: Tensor) -> Tensor:
        return feed_forward(x, self.w1, self.b1, self.w2, self.b2)


def feed_forward(x, w1, b1, w2, b2) -> Tensor:
    lead = x.shape[:-1]
    h = T.relu(x.reshape(-1, x.shape[-1]) @ w1 + b1)
    out = h @ w2 + b2
    return out.reshape(*lead, out.shape[-1])


class LayerNorm(Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.gain = Parameter(np.ones(d_model))
        self.bias = Parameter(np.zeros(d_model))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)
