"""Parameter containers and the handful of layers the architectures use."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .autograd import Parameter, Tensor
from .rng import Rng

__all__ = [
    "Module",
    "Conv2d",
    "ConvTranspose2d",
    "ChannelConv1d",
    "LayerNorm2d",
    "Linear",
]


class Module:
    """Minimal parameter container with deterministic traversal order.

    Submodules and parameters are discovered from instance attributes in
    insertion order, so `named_parameters()` gives a stable naming scheme
    for checkpoints and flat-vector views.
    """

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out: list[tuple[str, Parameter]] = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix=f"{full}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{full}.{i}."))
                    elif isinstance(item, Parameter):
                        out.append((f"{full}.{i}", item))
        return out

    def freeze(self) -> None:
        """Structurally exclude all parameters from backpropagation."""
        for p in self.parameters():
            p.requires_grad = False

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(arrays):
            missing = set(own) - set(arrays)
            extra = set(arrays) - set(own)
            raise KeyError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in own.items():
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)

    def get_flat(self) -> np.ndarray:
        """All parameters as one flat float32 vector (fixed naming order)."""
        if not self.parameters():
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([p.data.reshape(-1) for p in self.parameters()])

    def set_flat(self, vec: np.ndarray) -> None:
        offset = 0
        for p in self.parameters():
            n = p.size
            p.data = vec[offset : offset + n].reshape(p.data.shape).astype(
                p.data.dtype, copy=True
            )
            offset += n
        if offset != vec.size:
            raise ValueError(f"flat vector length {vec.size} != parameter count {offset}")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he_init(rng: Rng, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(shape, std=math.sqrt(2.0 / fan_in))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1,
                 padding: int | None = None, rng: Rng | None = None):
        if padding is None:
            padding = (k - 1) // 2
        self.stride = stride
        self.padding = padding
        rng = rng or Rng(0)
        self.weight = Parameter(_he_init(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 4, stride: int = 2,
                 padding: int = 1, rng: Rng | None = None):
        self.stride = stride
        self.padding = padding
        rng = rng or Rng(0)
        self.weight = Parameter(_he_init(rng, (c_in, c_out, k, k), c_in * k * k))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, stride=self.stride,
                                  padding=self.padding)


class ChannelConv1d(Module):
    """1-D convolution over the channel axis of a (B,C) descriptor."""

    def __init__(self, k: int = 3, rng: Rng | None = None):
        rng = rng or Rng(0)
        self.weight = Parameter(rng.normal((1, 1, k), std=1.0 / math.sqrt(k)))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d_channel(x, self.weight)


class LayerNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm_2d(x, self.gain, self.bias, eps=self.eps)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng | None = None):
        rng = rng or Rng(0)
        self.weight = Parameter(rng.normal((d_in, d_out), std=math.sqrt(1.0 / d_in)))
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
