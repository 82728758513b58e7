"""Parameter containers shared by the encoders and decoders."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .numerics import Param, Tensor, gelu, layer_norm, relu


class Module:
    """Attribute-walking parameter container.

    Parameters are discovered from instance attributes (Params, Modules and
    lists of Modules) in definition order, which fixes the naming and the
    order used by checkpoints and optimizers.
    """

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, value in vars(self).items():
            if isinstance(value, Param):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_params(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{prefix}{key}{i}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix.rstrip("."), self
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{key}{i}.")

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def assign_names(self, prefix: str = "") -> None:
        seen = set()
        for name, p in self.named_params(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def astype(self, dtype) -> Module:
        for p in self.params():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def randomize(self, rng: np.random.Generator, scale: float = 0.3) -> Module:
        """Overwrite every parameter with Gaussian noise (tests only)."""
        for name, p in self.named_params():
            p.data = (rng.standard_normal(p.shape) * scale).astype(p.dtype)
            if name.endswith("gain"):
                p.data = p.data + 1.0
        return self


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True,
                 zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else uniform_init(rng, d_in, (d_in, d_out))
        self.w = Param(w)
        self.b = Param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Param(np.ones(dim))
        self.bias = Param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Two-layer perceptron; ``zero_out`` starts the output layer at zero."""

    def __init__(self, rng: np.random.Generator, d_in: int, hidden: int, d_out: int,
                 act: str = "gelu", zero_out: bool = False):
        self.fc1 = Linear(rng, d_in, hidden)
        self.fc2 = Linear(rng, hidden, d_out, zero=zero_out)
        self._act = gelu if act == "gelu" else relu

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self._act(self.fc1(x)))
