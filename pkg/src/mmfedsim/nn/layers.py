"""Layer descriptors with explicit forward/backward passes.

Every layer works on float64 numpy arrays. Conv/pool layers take
``[batch, channels, length]`` tensors, dense layers take ``[batch, features]``.
``forward`` returns the output plus a cache consumed by ``backward``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError

Shape = tuple[int, ...]


@dataclass(frozen=True)
class Conv1D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1

    def param_shapes(self) -> dict[str, Shape]:
        return {
            "weight": (self.out_channels, self.in_channels, self.kernel),
            "bias": (self.out_channels,),
        }

    def fan_in(self) -> int:
        return self.in_channels * self.kernel

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 2 or in_shape[0] != self.in_channels:
            raise DimensionError(
                f"Conv1D expects ({self.in_channels}, length), got {in_shape}"
            )
        length = in_shape[1]
        if length < self.kernel:
            raise DimensionError(
                f"input length {length} shorter than kernel {self.kernel}"
            )
        return (self.out_channels, (length - self.kernel) // self.stride + 1)

    def forward(self, x: np.ndarray, p: dict[str, np.ndarray]):
        n, c, _ = x.shape
        w = p["weight"]
        cols = sliding_window_view(x, self.kernel, axis=2)[:, :, :: self.stride, :]
        out_len = cols.shape[2]
        # [n*out_len, c*k] patch matrix
        patches = cols.transpose(0, 2, 1, 3).reshape(n * out_len, c * self.kernel)
        y = patches @ w.reshape(self.out_channels, -1).T + p["bias"]
        y = y.reshape(n, out_len, self.out_channels).transpose(0, 2, 1)
        return np.ascontiguousarray(y), (x.shape, patches, out_len)

    def backward(self, dy: np.ndarray, p: dict[str, np.ndarray], cache):
        x_shape, patches, out_len = cache
        n, c, length = x_shape
        k, s = self.kernel, self.stride
        w = p["weight"]
        dy_rows = dy.transpose(0, 2, 1).reshape(n * out_len, self.out_channels)
        grads = {
            "weight": (dy_rows.T @ patches).reshape(w.shape),
            "bias": dy.sum(axis=(0, 2)),
        }
        dpatch = (dy_rows @ w.reshape(self.out_channels, -1)).reshape(n, out_len, c, k)
        dpatch = dpatch.transpose(0, 2, 1, 3)
        dx = np.zeros(x_shape)
        span = s * (out_len - 1) + 1
        for i in range(k):
            dx[:, :, i : i + span : s] += dpatch[:, :, :, i]
        return dx, grads


@dataclass(frozen=True)
class ReLU:
    def param_shapes(self) -> dict[str, Shape]:
        return {}

    def output_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def forward(self, x, p):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dy, p, mask):
        return np.where(mask, dy, 0.0), {}


@dataclass(frozen=True)
class MaxPool1D:
    """Non-overlapping max pooling (stride == kernel); trailing remainder dropped."""

    kernel: int

    def param_shapes(self) -> dict[str, Shape]:
        return {}

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 2:
            raise DimensionError(f"MaxPool1D expects (channels, length), got {in_shape}")
        if in_shape[1] < self.kernel:
            raise DimensionError(
                f"input length {in_shape[1]} shorter than pool {self.kernel}"
            )
        return (in_shape[0], in_shape[1] // self.kernel)

    def forward(self, x, p):
        n, c, length = x.shape
        out_len = length // self.kernel
        windows = x[:, :, : out_len * self.kernel].reshape(n, c, out_len, self.kernel)
        idx = windows.argmax(axis=3)
        y = np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]
        return y, (x.shape, idx)

    def backward(self, dy, p, cache):
        x_shape, idx = cache
        n, c, length = x_shape
        out_len = dy.shape[2]
        hit = np.arange(self.kernel) == idx[..., None]
        dx = np.zeros(x_shape)
        dx[:, :, : out_len * self.kernel] = (hit * dy[..., None]).reshape(
            n, c, out_len * self.kernel
        )
        return dx, {}


@dataclass(frozen=True)
class Flatten:
    def param_shapes(self) -> dict[str, Shape]:
        return {}

    def output_shape(self, in_shape: Shape) -> Shape:
        return (int(np.prod(in_shape)),)

    def forward(self, x, p):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, p, shape):
        return dy.reshape(shape), {}


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int

    def param_shapes(self) -> dict[str, Shape]:
        return {"weight": (self.out_dim, self.in_dim), "bias": (self.out_dim,)}

    def fan_in(self) -> int:
        return self.in_dim

    def output_shape(self, in_shape: Shape) -> Shape:
        if in_shape != (self.in_dim,):
            raise DimensionError(f"Dense expects ({self.in_dim},), got {in_shape}")
        return (self.out_dim,)

    def forward(self, x, p):
        return x @ p["weight"].T + p["bias"], x

    def backward(self, dy, p, x):
        grads = {"weight": dy.T @ x, "bias": dy.sum(axis=0)}
        return dy @ p["weight"], grads


Layer = Union[Conv1D, ReLU, MaxPool1D, Flatten, Dense]

LAYER_TYPES: dict[str, type] = {
    "Conv1D": Conv1D,
    "ReLU": ReLU,
    "MaxPool1D": MaxPool1D,
    "Flatten": Flatten,
    "Dense": Dense,
}


def layer_to_dict(layer: Layer) -> dict[str, Any]:
    d: dict[str, Any] = {"type": type(layer).__name__}
    d.update(layer.__dict__)
    return d


def layer_from_dict(d: dict[str, Any]) -> Layer:
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer type {kind!r}")
    return LAYER_TYPES[kind](**d)
