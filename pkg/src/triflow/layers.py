"""
Parameter containers built on the tensor core.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Mapping

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def init_parameter(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, name: str | None = None
) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Module:
    """Anything holding trainable tensors, directly or through child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{index}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        unexpected = state.keys() - own.keys()
        if missing or unexpected:
            raise ShapeError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(T.get_default_dtype())


class Conv2d(Module):
    def __init__(
        self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator
    ):
        fan_in = in_channels * kernel * kernel
        self.weight = init_parameter(rng, (out_channels, in_channels, kernel, kernel), fan_in)
        self.bias = init_parameter(rng, (out_channels,), fan_in)
        self.pad = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=1, pad=self.pad)


class SeparableConv2d(Module):
    """Large-kernel depth-wise convolution followed by a 1×1 channel mix."""

    def __init__(
        self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator
    ):
        fan_in = kernel * kernel
        self.depthwise = init_parameter(rng, (in_channels, 1, kernel, kernel), fan_in)
        self.depthwise_bias = init_parameter(rng, (in_channels,), fan_in)
        self.pointwise = Conv2d(in_channels, out_channels, 1, rng)
        self.pad = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        y = T.depthwise_conv2d(x, self.depthwise, self.depthwise_bias, pad=self.pad)
        return self.pointwise(y)


class ConvGRU(Module):
    """Gated convolutional recurrent cell; the candidate goes through tanh."""

    def __init__(
        self,
        hidden_dim: int,
        input_dim: int,
        rng: np.random.Generator,
        large_kernel: bool = False,
    ):
        def gate() -> Conv2d | SeparableConv2d:
            if large_kernel:
                return SeparableConv2d(hidden_dim + input_dim, hidden_dim, 7, rng)
            return Conv2d(hidden_dim + input_dim, hidden_dim, 3, rng)

        self.convz = gate()
        self.convr = gate()
        self.convq = gate()

    def __call__(self, h: Tensor, *inputs: Tensor) -> Tensor:
        x = T.concat_channels(list(inputs))
        hx = T.concat_channels([h, x])
        z = T.sigmoid(self.convz(hx))
        r = T.sigmoid(self.convr(hx))
        q = T.tanh(self.convq(T.concat_channels([r * h, x])))
        return (1.0 - z) * h + z * q
