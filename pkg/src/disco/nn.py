"""Layer primitives: parameter containers over the tensor ops."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["Module", "Linear", "Conv2d", "kaiming_uniform"]


def kaiming_uniform(shape: tuple, fan_in: int, rng: np.random.Generator,
                    dtype=None) -> np.ndarray:
    """He-style uniform init for ReLU nets: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = float(np.sqrt(6.0 / fan_in))
    arr = rng.uniform(-bound, bound, size=shape)
    return arr.astype(dtype if dtype is not None else T.default_dtype())


class Module:
    """Base container. Subclasses register parameters and submodules as
    attributes; discovery order follows attribute insertion order, so the
    parameter list is deterministic for identical construction code."""

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend((f"{key}.{sub}", p) for sub, p in val.named_parameters())
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend((f"{key}.{i}.{sub}", p)
                                   for sub, p in item.named_parameters())
                    elif isinstance(item, Tensor):
                        out.append((f"{key}.{i}", item))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def astype_(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """y = x @ W + b with W of shape (in_dim, out_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.weight = Tensor(kaiming_uniform((in_dim, out_dim), in_dim, rng),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=T.default_dtype()),
                           requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class Conv2d(Module):
    """3x3-style conv over NCHW with weight (filters, in_channels, kh, kw)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 bias: bool = True):
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) \
            else kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kh * kw
        self.weight = Tensor(
            kaiming_uniform((out_channels, in_channels, kh, kw), fan_in, rng),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=T.default_dtype()),
                           requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding)
