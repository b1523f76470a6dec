"""Parameter containers and the layer building blocks shared by both model families."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .. import tensor as T
from ..errors import ShapeMismatch
from ..tensor import Tensor


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if name.startswith("running_") and isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {n: p for n, p in self.named_parameters()}
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        extra = set(state) - set(own) - set(bufs)
        if missing or extra:
            raise ShapeMismatch(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, arr in state.items():
            target = own[name].data if name in own else bufs[name]
            if target.shape != arr.shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {arr.shape} != model shape {target.shape}")
            target[...] = arr

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (used by the float64 gradient harness)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for name, value in list(vars(self).items()):
            if name.startswith("running_") and isinstance(value, np.ndarray):
                setattr(self, name, value.astype(dtype))
        for _, child in self._children():
            if isinstance(child, Module):
                child._cast_buffers(dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map over the last axis."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = Tensor(kaiming_uniform(rng, (d_in, d_out), d_in), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeMismatch(f"linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    """Convolution over channels-last activations; kernels stored F×C×kh×kw."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, padding: int = 0):
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(kaiming_uniform(rng, (c_out, c_in, kernel, kernel), fan_in), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d_nhwc(x, self.weight, None, self.stride, self.padding)


class BatchNorm(Module):
    """Batch norm over every axis but ``channel_axis`` (default: last)."""

    def __init__(self, channels: int, channel_axis: int = -1, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.channel_axis = channel_axis
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.channel_axis, self.training, self.momentum, self.eps)


class LBR(Module):
    """Linear (no bias) -> batch norm -> ReLU, applied per point."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.linear = Linear(rng, d_in, d_out, bias=False)
        self.bn = BatchNorm(d_out, channel_axis=-1)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.linear(x)))
