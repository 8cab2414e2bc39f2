"""Stateful layer objects wrapping the kernels in :mod:`dentseg.nn.functional`.

A layer owns its trainable ``params``, non-trainable ``buffers`` and the
``grads`` written by the last backward call. Forward caches are only kept in
train mode, so inference over large images stays memory-light.
"""
from __future__ import annotations

import numpy as np

from . import functional as F

DTYPE = np.float32


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class Layer:
    kind = ""

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_channels(self, in_channels: int) -> int:
        return in_channels

    def output_spatial(self, h: int, w: int) -> tuple[int, int]:
        return h, w

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called without a train-mode forward")
        cache, self._cache = self._cache, None
        return cache

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class Conv2d(Layer):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int = 3,
                 rng: np.random.Generator | None = None):
        super().__init__(name)
        if kernel_size not in (1, 3):
            raise ValueError("kernel_size must be 1 or 3")
        self.kind = f"conv{kernel_size}x{kernel_size}"
        self.in_channels, self.out_channels = in_channels, out_channels
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.params["weight"] = he_normal(rng, shape, in_channels * kernel_size * kernel_size)
        self.params["bias"] = np.zeros(out_channels, dtype=DTYPE)

    def forward(self, x, train=False):
        y = F.conv2d_forward(x, self.params["weight"], self.params["bias"])
        self._cache = x if train else None
        return y

    def backward(self, dy):
        tape = F.conv2d_backward(self._take_cache(), self.params["weight"], dy)
        self.grads = tape.params
        return tape.input

    def output_channels(self, in_channels):
        return self.out_channels


class ConvTranspose2x(Layer):
    kind = "conv_transpose2x"

    def __init__(self, name: str, in_channels: int, out_channels: int, rng: np.random.Generator | None = None):
        super().__init__(name)
        self.in_channels, self.out_channels = in_channels, out_channels
        rng = rng if rng is not None else np.random.default_rng(0)
        # each output pixel is fed by exactly one input pixel per input channel
        self.params["weight"] = he_normal(rng, (in_channels, out_channels, 2, 2), in_channels)
        self.params["bias"] = np.zeros(out_channels, dtype=DTYPE)

    def forward(self, x, train=False):
        y = F.conv_transpose2x_forward(x, self.params["weight"], self.params["bias"])
        self._cache = x if train else None
        return y

    def backward(self, dy):
        tape = F.conv_transpose2x_backward(self._take_cache(), self.params["weight"], dy)
        self.grads = tape.params
        return tape.input

    def output_channels(self, in_channels):
        return self.out_channels

    def output_spatial(self, h, w):
        return 2 * h, 2 * w


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def forward(self, x, train=False):
        y, idx = F.maxpool2x2_forward(x)
        self._cache = idx if train else None
        return y

    def backward(self, dy):
        return F.maxpool2x2_backward(dy, self._take_cache())

    def output_spatial(self, h, w):
        return h // 2, w // 2


class UpsampleNearest2x(Layer):
    kind = "upsample_nearest2x"

    def forward(self, x, train=False):
        self._cache = True if train else None
        return F.upsample_nearest2x_forward(x)

    def backward(self, dy):
        self._take_cache()
        return F.upsample_nearest2x_backward(dy)

    def output_spatial(self, h, w):
        return 2 * h, 2 * w


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name: str, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        super().__init__(name)
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=DTYPE)
        self.params["beta"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_mean"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(channels, dtype=DTYPE)

    def forward(self, x, train=False):
        y, cache, mean, var = F.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train, self.momentum, self.eps,
        )
        if train:
            self.buffers["running_mean"][...] = mean
            self.buffers["running_var"][...] = var
        self._cache = cache if train else None
        return y

    def backward(self, dy):
        tape = F.batchnorm_backward(dy, self._take_cache())
        self.grads = tape.params
        return tape.input


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._cache = x if train else None
        return F.relu_forward(x)

    def backward(self, dy):
        return F.relu_backward(dy, self._take_cache())


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False):
        y = F.sigmoid_forward(x)
        self._cache = y if train else None
        return y

    def backward(self, dy):
        return F.sigmoid_backward(dy, self._take_cache())


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name: str, rate: float, rng: np.random.Generator | None = None):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise F.BadRate(f"dropout rate must satisfy 0 <= rate < 1, got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x, train=False):
        y, keep = F.dropout_forward(x, self.rate, train, self.rng)
        self._cache = (keep,) if train else None
        return y

    def backward(self, dy):
        (keep,) = self._take_cache()
        return F.dropout_backward(dy, keep, self.rate)
