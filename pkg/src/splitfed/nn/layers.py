"""Layer kinds for 1-D convolutional residual classifiers.

Each layer is an immutable hyperparameter record that also knows how to
infer its output shape, initialise its parameters and run forward/backward on
numpy arrays. Shapes passed to ``out_shape`` are per-sample: ``(C, L)`` for
signals and ``(F,)`` for feature vectors. Batched arrays carry a leading
batch axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from splitfed import kernels
from splitfed.nn.errors import ShapeError


def same_padding(length: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return ``(out_len, pad_left, pad_right)`` for "same" padding."""
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + kernel - length, 0)
    return out_len, total // 2, total - total // 2


def _he_uniform(rng, shape, fan_in, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _expect_signal(layer, shape, channels=None):
    if len(shape) != 2:
        raise ShapeError(f"{layer.kind} expects (channels, length) input, got {shape}")
    if channels is not None and shape[0] != channels:
        raise ShapeError(f"{layer.kind} expects {channels} channels, got {shape[0]}")


class Layer:
    kind = "layer"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def init_params(self, in_shape, rng, dtype):
        return {}

    def init_buffers(self, in_shape, dtype):
        return {}

    def forward(self, x, params, buffers, train):
        raise NotImplementedError

    def backward(self, dy, cache, params):
        raise NotImplementedError


@dataclass(frozen=True)
class Conv1D(Layer):
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: str = "same"
    bias: bool = True
    kind = "conv1d"

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride) < 1:
            raise ShapeError(f"conv1d sizes must be positive: {self}")
        if self.padding not in ("same", "valid"):
            raise ShapeError(f"conv1d padding must be 'same' or 'valid', got {self.padding!r}")

    def _geometry(self, length):
        if self.padding == "same":
            return same_padding(length, self.kernel, self.stride)
        if length < self.kernel:
            raise ShapeError(f"conv1d kernel {self.kernel} longer than input {length}")
        return (length - self.kernel) // self.stride + 1, 0, 0

    def out_shape(self, in_shape):
        _expect_signal(self, in_shape, self.in_channels)
        return (self.out_channels, self._geometry(in_shape[1])[0])

    def init_params(self, in_shape, rng, dtype):
        fan_in = self.in_channels * self.kernel
        p = {"weight": _he_uniform(rng, (self.out_channels, self.in_channels, self.kernel), fan_in, dtype)}
        if self.bias:
            p["bias"] = np.zeros(self.out_channels, dtype=dtype)
        return p

    def forward(self, x, params, buffers, train):
        n, c, length = x.shape
        out_len, left, right = self._geometry(length)
        xp = np.pad(x, ((0, 0), (0, 0), (left, right))) if left or right else x
        xp = np.ascontiguousarray(xp)
        cols = kernels.im2col(xp, self.kernel, self.stride, out_len)
        w2 = params["weight"].reshape(self.out_channels, -1)
        y = cols @ w2.T
        if self.bias:
            y += params["bias"]
        return np.ascontiguousarray(y.transpose(0, 2, 1)), (cols, length, left, xp.shape[2])

    def backward(self, dy, cache, params):
        cols, length, left, padded_len = cache
        w = params["weight"]
        dyt = dy.transpose(0, 2, 1)
        grads = {
            "weight": (dyt.reshape(-1, self.out_channels).T @ cols.reshape(-1, cols.shape[2])).reshape(w.shape)
        }
        if self.bias:
            grads["bias"] = dy.sum(axis=(0, 2))
        dcols = np.ascontiguousarray(dyt @ w.reshape(self.out_channels, -1))
        dxp = kernels.col2im(dcols, self.in_channels, self.kernel, self.stride, padded_len)
        return np.ascontiguousarray(dxp[:, :, left : left + length]), grads


@dataclass(frozen=True)
class BatchNorm1D(Layer):
    channels: int
    epsilon: float = 1e-5
    momentum: float = 0.9
    kind = "batchnorm1d"

    def out_shape(self, in_shape):
        if len(in_shape) not in (1, 2) or in_shape[0] != self.channels:
            raise ShapeError(f"batchnorm1d expects {self.channels} channels, got {in_shape}")
        return tuple(in_shape)

    def init_params(self, in_shape, rng, dtype):
        return {"scale": np.ones(self.channels, dtype=dtype), "shift": np.zeros(self.channels, dtype=dtype)}

    def init_buffers(self, in_shape, dtype):
        return {"running_mean": np.zeros(self.channels, dtype=dtype), "running_var": np.ones(self.channels, dtype=dtype)}

    def _bcast(self, v, ndim):
        return v.reshape((1, -1, 1) if ndim == 3 else (1, -1))

    def forward(self, x, params, buffers, train):
        axes = (0, 2) if x.ndim == 3 else (0,)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            buffers["running_mean"] = (m * buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
            buffers["running_var"] = (m * buffers["running_var"] + (1 - m) * var).astype(x.dtype)
        else:
            mean, var = buffers["running_mean"], buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.epsilon))
        xhat = (x - self._bcast(mean, x.ndim)) * self._bcast(inv_std, x.ndim)
        y = xhat * self._bcast(params["scale"], x.ndim) + self._bcast(params["shift"], x.ndim)
        return y, (xhat, inv_std, axes, train)

    def backward(self, dy, cache, params):
        xhat, inv_std, axes, train = cache
        grads = {"scale": (dy * xhat).sum(axis=axes), "shift": dy.sum(axis=axes)}
        dxhat = dy * self._bcast(params["scale"], dy.ndim)
        if not train:
            return dxhat * self._bcast(inv_std, dy.ndim), grads
        count = dy.size // self.channels
        s1 = self._bcast(dxhat.sum(axis=axes), dy.ndim)
        s2 = self._bcast((dxhat * xhat).sum(axis=axes), dy.ndim)
        dx = (count * dxhat - s1 - xhat * s2) * self._bcast(inv_std / count, dy.ndim)
        return dx, grads


@dataclass(frozen=True)
class ReLU(Layer):
    kind = "relu"

    def forward(self, x, params, buffers, train):
        mask = x > 0
        return np.where(mask, x, x.dtype.type(0)), mask

    def backward(self, dy, cache, params):
        return np.where(cache, dy, dy.dtype.type(0)), {}


def _pool_forward(x, window, stride):
    win = sliding_window_view(x, window, axis=2)[:, :, ::stride, :]
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg


def _pool_backward(dy, arg, window, stride, length):
    dx = np.zeros(dy.shape[:2] + (length,), dtype=dy.dtype)
    stop = (dy.shape[2] - 1) * stride + 1
    for w in range(window):
        dx[:, :, w : w + stop : stride] += np.where(arg == w, dy, dy.dtype.type(0))
    return dx


@dataclass(frozen=True)
class MaxPool1D(Layer):
    window: int
    stride: int = 0  # 0 means stride == window

    kind = "maxpool1d"

    @property
    def step(self):
        return self.stride or self.window

    def out_shape(self, in_shape):
        _expect_signal(self, in_shape)
        if in_shape[1] < self.window:
            raise ShapeError(f"maxpool1d window {self.window} longer than input {in_shape[1]}")
        return (in_shape[0], (in_shape[1] - self.window) // self.step + 1)

    def forward(self, x, params, buffers, train):
        y, arg = _pool_forward(x, self.window, self.step)
        return y, (arg, x.shape[2])

    def backward(self, dy, cache, params):
        arg, length = cache
        return _pool_backward(dy, arg, self.window, self.step, length), {}


@dataclass(frozen=True)
class GlobalAveragePool1D(Layer):
    kind = "gap"

    def out_shape(self, in_shape):
        _expect_signal(self, in_shape)
        return (in_shape[0],)

    def forward(self, x, params, buffers, train):
        return x.mean(axis=2), x.shape[2]

    def backward(self, dy, cache, params):
        length = cache
        return np.repeat(dy[:, :, None] / dy.dtype.type(length), length, axis=2), {}


@dataclass(frozen=True)
class Dense(Layer):
    in_features: int
    out_features: int
    bias: bool = True
    kind = "dense"

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},) input, got {in_shape}")
        return (self.out_features,)

    def init_params(self, in_shape, rng, dtype):
        p = {"weight": _he_uniform(rng, (self.out_features, self.in_features), self.in_features, dtype)}
        if self.bias:
            p["bias"] = np.zeros(self.out_features, dtype=dtype)
        return p

    def forward(self, x, params, buffers, train):
        y = x @ params["weight"].T
        if self.bias:
            y += params["bias"]
        return y, x

    def backward(self, dy, cache, params):
        grads = {"weight": dy.T @ cache}
        if self.bias:
            grads["bias"] = dy.sum(axis=0)
        return dy @ params["weight"], grads


@dataclass(frozen=True)
class ResidualStart(Layer):
    """Marks where the skip branch leaves the trunk."""

    kind = "residual_start"


@dataclass(frozen=True)
class ResidualEnd(Layer):
    """Adds the skip branch back onto the trunk.

    The skip input is max-pooled by ``pool`` (window == stride) and, with
    ``pad``, zero-padded on trailing channels to match the trunk.
    """

    pool: int = 1
    pad: bool = False
    kind = "residual_end"

    def skip_shape(self, skip_shape):
        c, length = skip_shape
        if self.pool > 1:
            if length < self.pool:
                raise ShapeError(f"residual_end pool {self.pool} longer than skip length {length}")
            length = length // self.pool
        return (c, length)

    def check_merge(self, trunk_shape, skip_shape):
        _expect_signal(self, trunk_shape)
        _expect_signal(self, skip_shape)
        sc, sl = self.skip_shape(skip_shape)
        tc, tl = trunk_shape
        if sl != tl or (sc != tc and not (self.pad and sc < tc)):
            raise ShapeError(f"residual skip shape {skip_shape} does not match trunk {trunk_shape}")
        return tuple(trunk_shape)

    def merge(self, trunk, skip):
        arg = None
        if self.pool > 1:
            skip, arg = _pool_forward(skip, self.pool, self.pool)
        if skip.shape[1] < trunk.shape[1]:
            skip = np.pad(skip, ((0, 0), (0, trunk.shape[1] - skip.shape[1]), (0, 0)))
        return trunk + skip, arg

    def merge_backward(self, dy, arg, skip_shape):
        dskip = dy[:, : skip_shape[0], :]
        if self.pool > 1:
            dskip = _pool_backward(np.ascontiguousarray(dskip), arg, self.pool, self.pool, skip_shape[1])
        return dy, np.ascontiguousarray(dskip)


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Conv1D, BatchNorm1D, ReLU, MaxPool1D, GlobalAveragePool1D, Dense, ResidualStart, ResidualEnd)
}
