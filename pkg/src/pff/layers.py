"""Layer primitives with hand-written forward and backward passes.

Activations are channel-last ``(N, H, W, C)`` arrays.  Each layer caches what
its backward pass needs during ``forward`` and writes parameter gradients into
``self.grads`` during ``backward``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    params: dict
    buffers: dict

    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.grads = {}

    def forward(self, x, train: bool):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError


class Conv2d(Layer):
    """Stride-1 convolution with zero "same" padding; weight shape ``(out, in, k, k)``."""

    def __init__(self, cin: int, cout: int, ksize: int, rng: np.random.Generator, dtype=np.float32, gain: float = 1.0):
        super().__init__()
        if ksize % 2 == 0:
            raise ValueError("convolution extent must be odd")
        self.ksize = ksize
        std = gain * np.sqrt(2.0 / (cin * ksize * ksize))
        self.params["weight"] = (rng.standard_normal((cout, cin, ksize, ksize)) * std).astype(dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)
        self._cols = None
        self._shape = None

    def _im2col(self, x):
        n, h, w, c = x.shape
        k = self.ksize
        if k == 1:
            return x.reshape(n * h * w, c)
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        view = sliding_window_view(xp, (k, k), axis=(1, 2))  # (n, h, w, c, k, k)
        return view.reshape(n * h * w, c * k * k)

    def forward(self, x, train: bool):
        wt = self.params["weight"]
        cols = self._im2col(x)
        self._cols = cols
        self._shape = x.shape
        out = cols @ wt.reshape(wt.shape[0], -1).T + self.params["bias"]
        n, h, w, _ = x.shape
        return out.reshape(n, h, w, wt.shape[0])

    def backward(self, g):
        if self._cols is None:
            raise RuntimeError("backward called before forward")
        wt = self.params["weight"]
        n, h, w, c = self._shape
        cout = wt.shape[0]
        g2 = g.reshape(-1, cout)
        self.grads["weight"] = (g2.T @ self._cols).reshape(wt.shape)
        self.grads["bias"] = g2.sum(axis=0)
        dcols = g2 @ wt.reshape(cout, -1)
        k = self.ksize
        if k == 1:
            return dcols.reshape(n, h, w, c)
        p = k // 2
        dcols = dcols.reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dcols.dtype)
        for a in range(k):
            for b in range(k):
                dxp[:, a : a + h, b : b + w, :] += dcols[..., a, b]
        return dxp[:, p : p + h, p : p + w, :]


class BatchNorm2d(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, train: bool):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            n = x.size // x.shape[-1]
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1.0 - m
            rm += m * mean
            rv *= 1.0 - m
            rv += m * var * (n / max(n - 1, 1))
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, train)
        return gamma * xhat + beta

    def backward(self, g):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        xhat, inv_std, train = self._cache
        gamma = self.params["gamma"]
        self.grads["gamma"] = (g * xhat).sum(axis=(0, 1, 2))
        self.grads["beta"] = g.sum(axis=(0, 1, 2))
        dxhat = g * gamma
        if not train:
            return dxhat * inv_std
        n = g.size // g.shape[-1]
        s1 = dxhat.sum(axis=(0, 1, 2))
        s2 = (dxhat * xhat).sum(axis=(0, 1, 2))
        return (inv_std / n) * (n * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def forward(self, x, train: bool):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, g):
        return np.where(self._mask, g, 0).astype(g.dtype, copy=False)


class MaxPool2d(Layer):
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""

    def forward(self, x, train: bool):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"max pooling needs even spatial size, got {h}x{w}")
        win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        idx = win.argmax(axis=-1)
        self._idx = idx
        self._shape = x.shape
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        n, h, w, c = self._shape
        dwin = np.zeros((n, h // 2, w // 2, c, 4), dtype=g.dtype)
        np.put_along_axis(dwin, self._idx[..., None], g[..., None], axis=-1)
        return dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


class Upsample2d(Layer):
    """Nearest-neighbor 2x upsampling."""

    def forward(self, x, train: bool):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, g):
        n, h, w, c = g.shape
        return g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class ConvBlock(Layer):
    """conv -> batch norm -> ReLU."""

    def __init__(self, cin, cout, ksize, rng, dtype=np.float32, momentum=0.1, eps=1e-5):
        super().__init__()
        self.conv = Conv2d(cin, cout, ksize, rng, dtype)
        self.bn = BatchNorm2d(cout, momentum, eps, dtype)
        self.relu = ReLU()

    def children(self):
        return {"conv": self.conv, "bn": self.bn}

    def forward(self, x, train: bool):
        return self.relu.forward(self.bn.forward(self.conv.forward(x, train), train), train)

    def backward(self, g):
        return self.conv.backward(self.bn.backward(self.relu.backward(g)))


class Residual(Layer):
    """Two blocks with an identity skip: ``y = b2(b1(x)) + x``."""

    def __init__(self, first: Layer, second: Layer):
        super().__init__()
        self.first = first
        self.second = second

    def forward(self, x, train: bool):
        return self.second.forward(self.first.forward(x, train), train) + x

    def backward(self, g):
        return self.first.backward(self.second.backward(g)) + g
