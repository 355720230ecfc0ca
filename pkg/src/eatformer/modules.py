"""Parameter-holding layers and the :class:`Module` container protocol."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .errors import ConfigurationError
from .tensor import Parameter, Tensor, gelu, relu

NORM_KINDS = ("batchnorm", "layernorm")
ACTIVATIONS = ("gelu", "relu")


@dataclass
class LayerCost:
    """Cost of one named layer: parameter count, multiply-accumulates and
    non-MAC operations (softmax exponentials/normalisation)."""

    name: str
    params: int
    macs: int
    extra_flops: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.extra_flops


def leaf_cost(name: str, module: "Module", macs: int = 0, extra_flops: int = 0) -> LayerCost:
    return LayerCost(name, module.num_parameters(), int(macs), int(extra_flops))


class Module:
    """Base class: attributes that are Parameters, Modules, lists of Modules,
    or registered numpy buffers are discovered in insertion order."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if "_buffer_names" not in vars(self):
            self._buffer_names = []
        self._buffer_names.append(name)
        setattr(self, name, value)

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(uniform_init(rng, (in_features, out_features), in_features))
        self.bias = Parameter(uniform_init(rng, (out_features,), in_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def macs(self, tokens: int) -> int:
        return tokens * self.in_features * self.out_features


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        dilation: int = 1,
        groups: int = 1,
        padding: int | None = None,
        bias: bool = True,
    ):
        if in_channels % groups or out_channels % groups:
            raise ConfigurationError(f"channels {in_channels}->{out_channels} not divisible by groups={groups}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        self.padding = dilation * (kernel_size - 1) // 2 if padding is None else padding
        fan_in = in_channels // groups * kernel_size * kernel_size
        self.weight = Parameter(
            uniform_init(rng, (out_channels, in_channels // groups, kernel_size, kernel_size), fan_in)
        )
        self.bias = Parameter(uniform_init(rng, (out_channels,), fan_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.groups, self.padding)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, d, p = self.kernel_size, self.stride, self.dilation, self.padding
        return F.conv_output_size(h, k, s, d, p), F.conv_output_size(w, k, s, d, p)

    def macs(self, h: int, w: int) -> int:
        ho, wo = self.output_size(h, w)
        return self.out_channels * (self.in_channels // self.groups) * self.kernel_size**2 * ho * wo


class BatchNorm(Module):
    """Batch norm over channel ``axis`` (1 for images, -1 for sequences)."""

    def __init__(self, num_features: int, axis: int = 1, momentum: float = 0.1, eps: float = F.BATCHNORM_EPS):
        self.num_features = num_features
        self.axis = axis
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(num_features))
        self.bias = Parameter(np.zeros(num_features))
        self.register_buffer("running_mean", np.zeros(num_features))
        self.register_buffer("running_var", np.ones(num_features))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps, self.axis,
        )


class LayerNorm(Module):
    def __init__(self, num_features: int, axis: int = 1, eps: float = F.LAYERNORM_EPS):
        self.num_features = num_features
        self.axis = axis
        self.eps = eps
        self.weight = Parameter(np.ones(num_features))
        self.bias = Parameter(np.zeros(num_features))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps, self.axis)


def make_norm(kind: str, num_features: int, axis: int = 1) -> Module:
    if kind == "batchnorm":
        return BatchNorm(num_features, axis=axis)
    if kind == "layernorm":
        return LayerNorm(num_features, axis=axis)
    raise ConfigurationError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


def activation(kind: str):
    if kind == "gelu":
        return gelu
    if kind == "relu":
        return relu
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
