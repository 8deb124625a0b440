"""Parameterized building blocks and the module/parameter registry."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    """Fan-in scaled uniform initialization, U(-sqrt(3/fan_in), +sqrt(3/fan_in))."""
    limit = np.sqrt(3.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """Base class giving containers a recursive named-parameter walk."""

    def named_params(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_params(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def params(self) -> dict[str, Tensor]:
        return dict(self.named_params())

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def zero_grads(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ValueError(
                f"parameter names do not match checkpoint (missing={missing}, unexpected={extra})"
            )
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(
                    f"shape mismatch for {name}: model {p.shape} vs checkpoint {arr.shape}"
                )
            p.data = arr.copy()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params().items()}


class Conv3x3(Module):
    """3x3 convolution with optional spatial batch-norm + ReLU."""

    def __init__(self, rng, c_in: int, c_out: int, stride: int = 1,
                 norm_relu: bool = True):
        self.stride = stride
        self.norm_relu = norm_relu
        self.weight = uniform_init(rng, (c_out, c_in, 3, 3), fan_in=c_in * 9)
        self.bias = zeros_param(c_out)
        if norm_relu:
            self.gamma = ones_param(c_out)
            self.beta = zeros_param(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv2d_3x3(x, self.weight, self.bias, stride=self.stride)
        if self.norm_relu:
            y = ops.spatial_batchnorm(y, self.gamma, self.beta).relu()
        return y


class Conv1x1(Module):
    """Pointwise channel projection, optionally with batch-norm + ReLU."""

    def __init__(self, rng, c_in: int, c_out: int, norm_relu: bool = False,
                 bias: bool = True):
        self.norm_relu = norm_relu
        self.weight = uniform_init(rng, (c_out, c_in), fan_in=c_in)
        self.bias = zeros_param(c_out) if bias else None
        if norm_relu:
            self.gamma = ones_param(c_out)
            self.beta = zeros_param(c_out)

    def project(self, x: Tensor) -> Tensor:
        return ops.conv1x1(x, self.weight, self.bias)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.project(x)
        if self.norm_relu:
            y = ops.spatial_batchnorm(y, self.gamma, self.beta).relu()
        return y


class Linear(Module):
    """Row-wise affine map for (N, C_in) matrices."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.weight = uniform_init(rng, (c_in, c_out), fan_in=c_in)
        self.bias = zeros_param(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias.reshape(1, -1)
