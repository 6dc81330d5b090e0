"""Layer containers with dotted parameter names for checkpointing."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from glpnet import ops
from glpnet.tensor import Parameter, Tensor, get_default_dtype


class Module:
    """Base class. Children and parameters are discovered from attributes
    in assignment order, so names are stable across runs."""

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, ModuleList):
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._children():
            if isinstance(value, (Module, ModuleList)):
                yield from value.named_buffers(f"{prefix}{key}.")

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if strict and set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in state.items():
            if name in params:
                target = params[name].data
            elif name in buffers:
                target = buffers[name]
            else:
                continue
            if target.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {target.shape}")
            target[...] = value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            if isinstance(child, (Module, ModuleList)):
                child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items = list(modules)

    def _children(self):
        for i, m in enumerate(self._items):
            yield str(i), m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _init(shape, fan_in: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    std = scale * np.sqrt(2.0 / max(fan_in, 1))
    return (rng.standard_normal(shape) * std).astype(get_default_dtype())


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 pad: int = 0, dilation: int = 1, bias: bool = True, zero_init: bool = False):
        shape = (cout, cin, kernel, kernel)
        if zero_init:
            w = np.zeros(shape, dtype=get_default_dtype())
        else:
            w = _init(shape, cin * kernel * kernel, rng)
        self.weight = Parameter(w)
        if bias:
            self.bias = Parameter(np.zeros(cout, dtype=get_default_dtype()))
        else:
            self.bias = None
        self.stride, self.pad, self.dilation = stride, pad, dilation

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.dilation)


class Linear(Module):
    """``y = x @ W^T`` over the last axis, bias-free unless asked."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = False):
        self.weight = Parameter(_init((cout, cin), cin, rng, scale=np.sqrt(0.5)))
        self.bias = Parameter(np.zeros(cout, dtype=get_default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        y = ops.matmul(x.reshape(-1, x.shape[-1]), ops.transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(lead + (self.weight.shape[0],))


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        dtype = get_default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps

    def named_buffers(self, prefix: str = ""):
        yield f"{prefix}running_mean", self.running_mean
        yield f"{prefix}running_var", self.running_var

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 dilation: int = 1, relu: bool = True):
        pad = dilation * (kernel - 1) // 2
        self.conv = Conv2d(cin, cout, kernel, rng, stride=stride, pad=pad, dilation=dilation, bias=False)
        self.bn = BatchNorm2d(cout)
        self.relu = relu

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return ops.relu(y) if self.relu else y
