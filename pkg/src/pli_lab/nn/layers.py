"""Layer types with explicit forward/backward passes.

Every layer caches what it needs during ``forward`` and consumes the cache in
``backward``.  Arrays are NCHW for image-like tensors and NF for flat ones.
Weight layouts follow the common deep-learning convention so checkpoints are
easy to reason about: ``Conv2d`` weights are ``(out, in, k, k)``,
``ConvTranspose2d`` weights are ``(in, out, k, k)`` and ``Linear`` weights are
``(out, in)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pli_lab.errors import ConfigurationError, StateError


@dataclass
class Parameter:
    """A trainable array together with its gradient slot."""

    data: np.ndarray
    grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True
        self.index = -1  # position inside a Network, used in error messages
        self._cache = None

    # -- shape bookkeeping -------------------------------------------------
    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def descriptor(self) -> list[int]:
        """Integer hyperparameters that, with the kind, rebuild the layer."""
        return []

    def _name(self) -> str:
        return f"layer {self.index} ({self.kind})"

    def _fail(self, msg: str):
        raise ConfigurationError(f"{self._name()}: {msg}")

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{self._name()}: backward called before forward")
        return self._cache

    # -- passes -------------------------------------------------------------
    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gy: np.ndarray, need_input: bool = True) -> np.ndarray:
        """Fill parameter grads; return d(input), or None when ``need_input`` is false."""
        raise NotImplementedError

    def __repr__(self) -> str:
        args = ", ".join(str(v) for v in self.descriptor())
        return f"{type(self).__name__}({args})"


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Identity(Layer):
    kind = "identity"

    def forward(self, x):
        self._cache = True
        return x

    def backward(self, gy, need_input=True):
        self._cached()
        return gy


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.k, self.stride, self.padding = kernel_size, stride, padding
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.params["weight"] = Parameter(_fan_in_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype))
        self.params["bias"] = Parameter(_fan_in_uniform(rng, (out_channels,), fan_in, dtype))

    def descriptor(self):
        return [self.in_channels, self.out_channels, self.k, self.stride, self.padding]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            self._fail(f"expected input (C={self.in_channels}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            self._fail(f"input spatial size {h}x{w} smaller than kernel {self.k}")
        return (self.out_channels, ho, wo)

    def forward(self, x):
        self.output_shape(x.shape[1:])
        p, s, k = self.padding, self.stride, self.k
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = win.shape[2], win.shape[3]
        w = self.params["weight"].data
        # (N, Ho, Wo, C, k, k) @ (C*k*k, O)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, self.in_channels * k * k)
        y = cols @ w.reshape(self.out_channels, -1).T
        y = y.reshape(x.shape[0], ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        y = y + self.params["bias"].data[None, :, None, None]
        self._cache = (x.shape, xp.shape, cols, ho, wo)
        return np.ascontiguousarray(y)

    def backward(self, gy, need_input=True):
        xshape, xpshape, cols, ho, wo = self._cached()
        p, s, k = self.padding, self.stride, self.k
        n = xshape[0]
        w = self.params["weight"].data
        g2 = gy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        self.params["weight"].grad = (g2.T @ cols).reshape(w.shape)
        self.params["bias"].grad = gy.sum(axis=(0, 2, 3))
        if not need_input:
            return None
        gcols = (g2 @ w.reshape(self.out_channels, -1)).reshape(n, ho, wo, self.in_channels, k, k)
        gxp = np.zeros(xpshape, dtype=gy.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            gxp = gxp[:, :, p:-p, p:-p]
        return np.ascontiguousarray(gxp)


class ConvTranspose2d(Layer):
    """Fractionally-strided convolution: the adjoint of ``Conv2d``."""

    kind = "conv_transpose2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.k, self.stride, self.padding = kernel_size, stride, padding
        rng = rng or np.random.default_rng(0)
        # fan-in of the equivalent direct convolution
        fan_in = out_channels * kernel_size * kernel_size
        self.params["weight"] = Parameter(_fan_in_uniform(
            rng, (in_channels, out_channels, kernel_size, kernel_size), fan_in, dtype))
        self.params["bias"] = Parameter(_fan_in_uniform(rng, (out_channels,), fan_in, dtype))

    def descriptor(self):
        return [self.in_channels, self.out_channels, self.k, self.stride, self.padding]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            self._fail(f"expected input (C={self.in_channels}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = (h - 1) * self.stride - 2 * self.padding + self.k
        wo = (w - 1) * self.stride - 2 * self.padding + self.k
        if ho < 1 or wo < 1:
            self._fail(f"non-positive output size for input {h}x{w}")
        return (self.out_channels, ho, wo)

    def forward(self, x):
        self.output_shape(x.shape[1:])
        n, _, h, w_ = x.shape
        p, s, k = self.padding, self.stride, self.k
        wt = self.params["weight"].data
        xf = x.transpose(0, 2, 3, 1).reshape(-1, self.in_channels)
        cols = (xf @ wt.reshape(self.in_channels, -1)).reshape(n, h, w_, self.out_channels, k, k)
        hf, wf = (h - 1) * s + k, (w_ - 1) * s + k
        full = np.zeros((n, self.out_channels, hf, wf), dtype=np.result_type(x, wt))
        for i in range(k):
            for j in range(k):
                full[:, :, i:i + s * (h - 1) + 1:s, j:j + s * (w_ - 1) + 1:s] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        y = full[:, :, p:hf - p, p:wf - p] + self.params["bias"].data[None, :, None, None]
        self._cache = xf, x.shape
        return np.ascontiguousarray(y)

    def backward(self, gy, need_input=True):
        xf, xshape = self._cached()
        n, _, h, w_ = xshape
        p, s, k = self.padding, self.stride, self.k
        wt = self.params["weight"].data
        gfull = np.pad(gy, ((0, 0), (0, 0), (p, p), (p, p))) if p else gy
        gwin = sliding_window_view(gfull, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        gcols = gwin.transpose(0, 2, 3, 1, 4, 5).reshape(-1, self.out_channels * k * k)
        self.params["weight"].grad = (xf.T @ gcols).reshape(wt.shape)
        self.params["bias"].grad = gy.sum(axis=(0, 2, 3))
        if not need_input:
            return None
        gx = gcols @ wt.reshape(self.in_channels, -1).T
        return np.ascontiguousarray(gx.reshape(n, h, w_, self.in_channels).transpose(0, 3, 1, 2))


class BatchNorm2d(Layer):
    """Per-channel batch normalization with running statistics for eval mode."""

    kind = "batchnorm2d"

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["weight"] = Parameter(np.ones(channels, dtype=dtype))
        self.params["bias"] = Parameter(np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def descriptor(self):
        return [self.channels]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.channels:
            self._fail(f"expected {self.channels} channels, got shape {tuple(in_shape)}")
        return tuple(in_shape)

    def forward(self, x):
        self.output_shape(x.shape[1:])
        gamma = self.params["weight"].data[None, :, None, None]
        beta = self.params["bias"].data[None, :, None, None]
        if self.training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            unbiased = var * (m / max(m - 1, 1))
            rm[...] = (1 - self.momentum) * rm + self.momentum * mean
            rv[...] = (1 - self.momentum) * rv + self.momentum * unbiased
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, self.training)
        return (gamma * xhat + beta).astype(x.dtype, copy=False)

    def backward(self, gy, need_input=True):
        xhat, inv_std, training = self._cached()
        gamma = self.params["weight"].data
        self.params["weight"].grad = (gy * xhat).sum(axis=(0, 2, 3))
        self.params["bias"].grad = gy.sum(axis=(0, 2, 3))
        gxhat = gy * gamma[None, :, None, None]
        scale = inv_std[None, :, None, None]
        if not training:
            return gxhat * scale
        m = gy.shape[0] * gy.shape[2] * gy.shape[3]
        s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (scale / m) * (m * gxhat - s1 - xhat * s2)


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = Parameter(
            _fan_in_uniform(rng, (out_features, in_features), in_features, dtype))
        self.params["bias"] = Parameter(_fan_in_uniform(rng, (out_features,), in_features, dtype))

    def descriptor(self):
        return [self.in_features, self.out_features]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            self._fail(f"expected {self.in_features} input features, got shape {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x):
        self.output_shape(x.shape[1:])
        self._cache = x
        return x @ self.params["weight"].data.T + self.params["bias"].data

    def backward(self, gy, need_input=True):
        x = self._cached()
        self.params["weight"].grad = gy.T @ x
        self.params["bias"].grad = gy.sum(axis=0)
        return gy @ self.params["weight"].data


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, gy, need_input=True):
        return gy * self._cached()


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x):
        y = np.tanh(x)
        self._cache = y
        return y

    def backward(self, gy, need_input=True):
        y = self._cached()
        return gy * (1 - y * y)


class MaxPool2d(Layer):
    """Non-overlapping max pooling (stride equals the window); ties go to the lowest index."""

    kind = "maxpool2d"

    def __init__(self, kernel_size):
        super().__init__()
        self.k = kernel_size

    def descriptor(self):
        return [self.k]

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            self._fail(f"expected (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        if h < self.k or w < self.k:
            self._fail(f"input {h}x{w} smaller than window {self.k}")
        return (c, h // self.k, w // self.k)

    def forward(self, x):
        c, ho, wo = self.output_shape(x.shape[1:])
        k, n = self.k, x.shape[0]
        xc = x[:, :, :ho * k, :wo * k]
        win = xc.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        idx = win.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, gy, need_input=True):
        xshape, idx = self._cached()
        n, c, h, w = xshape
        k = self.k
        ho, wo = idx.shape[2], idx.shape[3]
        gwin = np.zeros((n, c, ho, wo, k * k), dtype=gy.dtype)
        np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
        gc = gwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        gx = np.zeros(xshape, dtype=gy.dtype)
        gx[:, :, :ho * k, :wo * k] = gc
        return gx


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, gy, need_input=True):
        return gy.reshape(self._cached())


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls
    for cls in (Identity, Conv2d, ConvTranspose2d, BatchNorm2d, Linear, ReLU, Tanh, MaxPool2d, Flatten)
}
