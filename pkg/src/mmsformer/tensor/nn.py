"""Parameters, a small module system and the layers the model is built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Registers parameters and child modules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


# -- initialisation -----------------------------------------------------------
def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def uniform_fan_in(rng: np.random.Generator, shape) -> np.ndarray:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for a ``[in, out]`` weight."""
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def kaiming_fan_out(rng: np.random.Generator, shape, groups: int = 1) -> np.ndarray:
    cout, _, k, _ = shape
    fan_out = k * k * cout // groups
    return rng.normal(0.0, np.sqrt(2.0 / fan_out), size=shape)


# -- layers -------------------------------------------------------------------
class Linear(Module):
    """Affine channel map with weight stored as ``[in, out]``.

    ``init`` is ``"trunc_normal"`` (std 0.02) or ``"uniform_fan_in"``.
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "trunc_normal"):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        shape = (in_features, out_features)
        w = uniform_fan_in(rng, shape) if init == "uniform_fan_in" else trunc_normal(rng, shape)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def pointwise(self, x: Tensor) -> Tensor:
        """Apply per pixel to a channel-major ``[C, H, W]`` map."""
        return T.pointwise_linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1, exact: bool = True):
        super().__init__()
        self.kernel_size, self.stride, self.padding, self.groups, self.exact = (
            kernel_size, stride, padding, groups, exact)
        shape = (out_ch, in_ch // groups, kernel_size, kernel_size)
        self.weight = Parameter(kaiming_fan_out(rng, shape, groups))
        self.bias = Parameter(np.zeros(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups, self.exact)
