"""Parameter store and the convolutional building blocks."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Tuple

import numpy as np

from . import ops
from .tensor import Tensor

NORM_EPS = 1e-5


class ParamStore:
    """Ordered ``name -> Tensor`` map of learnable parameters.

    Insertion order is the canonical order used for initialisation,
    optimizer state and checkpoints.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._kinds: dict = {}

    def add(self, name: str, shape, kind: str) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if kind not in ("weight", "bias", "gamma", "beta"):
            raise ValueError(f"unknown parameter kind {kind!r}")
        t = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        self._kinds[name] = kind
        return t

    def kind(self, name: str) -> str:
        return self._kinds[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list:
        return list(self._params)

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load_state(self, state) -> None:
        for name, t in self._params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != expected {t.shape}")
            t.data[...] = arr


def init_parameters(store: ParamStore, seed: int) -> None:
    """Kaiming-uniform (fan-in) conv weights, zero biases, unit gamma, zero beta."""
    rng = np.random.default_rng(seed)
    for name, t in store.items():
        kind = store.kind(name)
        if kind == "weight":
            fan_in = int(np.prod(t.shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            t.data[...] = rng.uniform(-bound, bound, size=t.shape)
        elif kind == "gamma":
            t.data[...] = 1.0
        else:
            t.data[...] = 0.0


class Conv:
    """Convolution with bias; ``dims`` is 2 or 3, odd kernels use same padding."""

    def __init__(self, store: ParamStore, name: str, in_ch: int, out_ch: int, kernel: int = 3, dims: int = 2):
        self.in_ch, self.out_ch, self.kernel, self.dims = in_ch, out_ch, kernel, dims
        self.weight = store.add(f"{name}.weight", (out_ch, in_ch) + (kernel,) * dims, "weight")
        self.bias = store.add(f"{name}.bias", (out_ch,), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        fn = ops.conv2d if self.dims == 2 else ops.conv3d
        return fn(x, self.weight, self.bias, pad=self.kernel // 2)


class Norm:
    def __init__(self, store: ParamStore, name: str, ch: int, dims: int = 2):
        self.dims = dims
        self.gamma = store.add(f"{name}.gamma", (ch,), "gamma")
        self.beta = store.add(f"{name}.beta", (ch,), "beta")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.instance_norm(x, self.gamma, self.beta, NORM_EPS, spatial_dims=self.dims)


class ConvBlock:
    """Two (conv 3^d, instance norm, relu) stages with an optional 2^d max pool.

    ``__call__`` returns ``(features, pooled)``; ``pooled`` is ``None`` when
    the block has no pool.
    """

    def __init__(self, store: ParamStore, name: str, in_ch: int, out_ch: int, pool: bool = False, dims: int = 2):
        self.in_ch, self.out_ch, self.pool, self.dims = in_ch, out_ch, pool, dims
        self.conv1 = Conv(store, f"{name}.conv1", in_ch, out_ch, 3, dims)
        self.norm1 = Norm(store, f"{name}.norm1", out_ch, dims)
        self.conv2 = Conv(store, f"{name}.conv2", out_ch, out_ch, 3, dims)
        self.norm2 = Norm(store, f"{name}.norm2", out_ch, dims)

    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        _check_channels(x, self.in_ch, self.dims, "ConvBlock")
        h = ops.relu(self.norm1(self.conv1(x)))
        h = ops.relu(self.norm2(self.conv2(h)))
        return h, (ops.maxpool(h, 2, self.dims) if self.pool else None)


def ConvBlock2D(store, name, in_ch, out_ch, pool=False):
    return ConvBlock(store, name, in_ch, out_ch, pool, dims=2)


class ResidualBlock3D:
    """Post-activation residual block: ``relu(norm(conv(relu(norm(conv x))))) + skip(x)``.

    The skip is the identity when channel counts match and a 1x1x1
    convolution otherwise.
    """

    def __init__(self, store: ParamStore, name: str, in_ch: int, out_ch: int):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.conv1 = Conv(store, f"{name}.conv1", in_ch, out_ch, 3, 3)
        self.norm1 = Norm(store, f"{name}.norm1", out_ch, 3)
        self.conv2 = Conv(store, f"{name}.conv2", out_ch, out_ch, 3, 3)
        self.norm2 = Norm(store, f"{name}.norm2", out_ch, 3)
        self.proj = Conv(store, f"{name}.proj", in_ch, out_ch, 1, 3) if in_ch != out_ch else None

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels(x, self.in_ch, 3, "ResidualBlock3D")
        h = ops.relu(self.norm1(self.conv1(x)))
        h = ops.relu(self.norm2(self.conv2(h)))
        skip = self.proj(x) if self.proj is not None else x
        return ops.add(h, skip)


def conv_block_2d_forward(block: ConvBlock, x: Tensor) -> Tensor:
    feat, pooled = block(x)
    return pooled if pooled is not None else feat


def residual_block_3d_forward(block: ResidualBlock3D, x: Tensor) -> Tensor:
    return block(x)


def conv_params(in_ch: int, out_ch: int, kernel: int, dims: int) -> int:
    return out_ch * in_ch * kernel ** dims + out_ch


def conv_block_params(in_ch: int, out_ch: int, dims: int = 2) -> int:
    return conv_params(in_ch, out_ch, 3, dims) + conv_params(out_ch, out_ch, 3, dims) + 4 * out_ch


def residual_block_params(in_ch: int, out_ch: int) -> int:
    n = conv_block_params(in_ch, out_ch, 3)
    return n + (conv_params(in_ch, out_ch, 1, 3) if in_ch != out_ch else 0)


def _check_channels(x: Tensor, expected: int, dims: int, who: str) -> None:
    ch = x.shape[x.ndim - dims - 1]
    if ch != expected:
        raise ops.ShapeError(f"{who}: input has {ch} channels, block expects {expected}")
