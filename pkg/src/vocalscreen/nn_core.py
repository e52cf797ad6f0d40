"""Small numpy neural-network core with reverse-mode gradients.

Layers are stateless with respect to a forward pass: ``forward`` returns the
output together with a cache, and ``backward`` consumes that cache. Shapes
exclude the leading batch axis. Image tensors are ``(C, H, W)`` and
sequences ``(T, D)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Incompatible tensor shape at a named layer."""


class StaleCacheError(RuntimeError):
    """A forward cache was used after the network's parameters changed."""


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


def _he_uniform(rng, fan_in, shape, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _glorot_uniform(rng, fan_in, fan_out, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# --------------------------------------------------------------------------
# Layers

class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.input_shape: tuple | None = None
        self.output_shape: tuple | None = None

    def build(self, input_shape, rng, dtype):
        self.input_shape = tuple(input_shape)
        self.output_shape = self._build(self.input_shape, rng, dtype)
        return self.output_shape

    def _build(self, input_shape, rng, dtype):
        return input_shape

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dy, cache):
        """Return ``(dx, grads)`` where ``grads`` maps parameter names."""
        raise NotImplementedError

    def spec(self) -> dict:
        return {"type": self.kind}

    def named_arrays(self):
        yield from self.params.items()
        yield from self.buffers.items()

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "type")
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, units: int, init: str = "he"):
        super().__init__()
        if units < 1:
            raise ValueError("units must be positive")
        self.units = units
        self.init = init

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 1:
            raise DimensionError(f"dense({self.units}) expects a flat input, got {input_shape}")
        fan_in = input_shape[0]
        shape = (fan_in, self.units)
        if self.init == "glorot":
            W = _glorot_uniform(rng, fan_in, self.units, shape, dtype)
        else:
            W = _he_uniform(rng, fan_in, shape, dtype)
        self.params = {"W": W, "b": np.zeros(self.units, dtype=dtype)}
        return (self.units,)

    def forward(self, x, training=False, rng=None):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dy, cache):
        x = cache
        grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.params["W"].T, grads

    def spec(self):
        return {"type": self.kind, "units": self.units, "init": self.init}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache):
        return dy * cache, {}


class Softmax(Layer):
    """Softmax over the last axis, max-shifted for stability."""

    kind = "softmax"

    def __init__(self, dim: int | None = None):
        super().__init__()
        self.dim = dim

    def _build(self, input_shape, rng, dtype):
        if self.dim is not None and input_shape[-1] != self.dim:
            raise DimensionError(f"softmax({self.dim}) got input of width {input_shape[-1]}")
        return input_shape

    def forward(self, x, training=False, rng=None):
        p = softmax(x)
        return p, p

    def backward(self, dy, cache):
        p = cache
        return p * (dy - (dy * p).sum(axis=-1, keepdims=True)), {}

    def spec(self):
        return {"type": self.kind, "dim": self.dim}


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0:
            return x, None
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, dy, cache):
        return (dy if cache is None else dy * cache), {}

    def spec(self):
        return {"type": self.kind, "rate": self.rate}


class Standardize(Layer):
    """Fixed per-row affine normalisation ``(x - mean) / scale``.

    The statistics are buffers, not parameters: call :meth:`fit` on the
    training inputs once, they are never updated by the optimiser.
    """

    kind = "standardize"

    def _build(self, input_shape, rng, dtype):
        rows = input_shape[0]
        self.buffers = {"mean": np.zeros(rows, dtype=dtype), "scale": np.ones(rows, dtype=dtype)}
        return input_shape

    def fit(self, X):
        X = np.asarray(X, dtype=np.float64)
        axes = (0,) + tuple(range(2, X.ndim))
        scale = X.std(axis=axes)
        self.buffers["mean"] = X.mean(axis=axes).astype(self.buffers["mean"].dtype)
        scale = np.where(scale > 1e-8, scale, 1.0)
        self.buffers["scale"] = scale.astype(self.buffers["scale"].dtype)
        return self

    def _bcast(self, v, x):
        return v.reshape((1, -1) + (1,) * (x.ndim - 2))

    def forward(self, x, training=False, rng=None):
        y = (x - self._bcast(self.buffers["mean"], x)) / self._bcast(self.buffers["scale"], x)
        return y.astype(x.dtype, copy=False), None

    def backward(self, dy, cache):
        return dy / self._bcast(self.buffers["scale"], dy), {}


class Flatten(Layer):
    kind = "flatten"

    def _build(self, input_shape, rng, dtype):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False, rng=None):
        return x.reshape(len(x), -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class ToImage(Layer):
    """(rows, cols) matrix -> single-channel image (1, rows, cols)."""

    kind = "to_image"

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 2:
            raise DimensionError(f"to_image expects a matrix, got {input_shape}")
        return (1,) + tuple(input_shape)

    def forward(self, x, training=False, rng=None):
        return x[:, None, :, :], None

    def backward(self, dy, cache):
        return dy[:, 0], {}


class ToSequence(Layer):
    """(features, time) matrix -> time-major sequence (time, features)."""

    kind = "to_sequence"

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 2:
            raise DimensionError(f"to_sequence expects a matrix, got {input_shape}")
        return (input_shape[1], input_shape[0])

    def forward(self, x, training=False, rng=None):
        return np.ascontiguousarray(x.transpose(0, 2, 1)), None

    def backward(self, dy, cache):
        return dy.transpose(0, 2, 1), {}


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 3:
            raise DimensionError(f"global_avg_pool expects (C, H, W), got {input_shape}")
        return (input_shape[0],)

    def forward(self, x, training=False, rng=None):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, cache):
        N, C, H, W = cache
        return np.broadcast_to(dy[:, :, None, None] / (H * W), cache).copy(), {}


def _conv_out(size, k, stride, pad_lo, pad_hi):
    return (size + pad_lo + pad_hi - k) // stride + 1


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, filters: int, kernel=2, stride: int = 1, padding="valid",
                 use_bias: bool = True):
        super().__init__()
        if filters < 1 or stride < 1:
            raise ValueError("filters and stride must be positive")
        self.filters = filters
        self.use_bias = use_bias
        self.kernel = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
        self.stride = stride
        self.padding = padding

    def _pads(self):
        kh, kw = self.kernel
        if self.padding == "valid":
            return (0, 0, 0, 0)
        if self.padding == "same":
            return ((kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2)
        if np.isscalar(self.padding):
            p = int(self.padding)
            return (p, p, p, p)
        return tuple(int(p) for p in self.padding)

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 3:
            raise DimensionError(f"conv2d({self.filters}) expects (C, H, W), got {input_shape}")
        C, H, W = input_shape
        kh, kw = self.kernel
        t, b, l, r = self._pads()
        Ho = _conv_out(H, kh, self.stride, t, b)
        Wo = _conv_out(W, kw, self.stride, l, r)
        if Ho < 1 or Wo < 1:
            raise DimensionError(f"conv2d({self.filters}) kernel {self.kernel} does not fit "
                                 f"input {input_shape}")
        fan_in = C * kh * kw
        self.params = {"W": _he_uniform(rng, fan_in, (fan_in, self.filters), dtype)}
        if self.use_bias:
            self.params["b"] = np.zeros(self.filters, dtype=dtype)
        return (self.filters, Ho, Wo)

    def forward(self, x, training=False, rng=None):
        t, b, l, r = self._pads()
        if t or b or l or r:
            x = np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))
        N, C, Hp, Wp = x.shape
        kh, kw = self.kernel
        s = self.stride
        Ho, Wo = (Hp - kh) // s + 1, (Wp - kw) // s + 1
        cols = kernels.im2col(np.ascontiguousarray(x), kh, kw, s)
        out = cols @ self.params["W"]
        if self.use_bias:
            out += self.params["b"]
        out = np.ascontiguousarray(out.reshape(N, Ho, Wo, self.filters).transpose(0, 3, 1, 2))
        return out, (cols, (N, C, Hp, Wp, Ho, Wo))

    def backward(self, dy, cache):
        cols, (N, C, Hp, Wp, Ho, Wo) = cache
        kh, kw = self.kernel
        d2 = dy.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, self.filters)
        grads = {"W": cols.T @ d2}
        if self.use_bias:
            grads["b"] = d2.sum(axis=0)
        dcols = (d2 @ self.params["W"].T).reshape(N, Ho, Wo, C, kh, kw)
        dx = kernels.col2im(np.ascontiguousarray(dcols), Hp, Wp, self.stride)
        t, b, l, r = self._pads()
        dx = dx[:, :, t:Hp - b, l:Wp - r]
        return dx, grads

    def spec(self):
        pad = self.padding if isinstance(self.padding, str) else list(self._pads())
        return {"type": self.kind, "filters": self.filters, "kernel": list(self.kernel),
                "stride": self.stride, "padding": pad, "use_bias": self.use_bias}


class MaxPool2D(Layer):
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped."""

    kind = "maxpool"

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 3:
            raise DimensionError(f"maxpool expects (C, H, W), got {input_shape}")
        C, H, W = input_shape
        if H < 2 or W < 2:
            raise DimensionError(f"maxpool(2,2) cannot pool input {input_shape}")
        return (C, H // 2, W // 2)

    def forward(self, x, training=False, rng=None):
        out, arg = kernels.maxpool2x2_forward(np.ascontiguousarray(x))
        return out, (arg, x.shape[2], x.shape[3])

    def backward(self, dy, cache):
        arg, H, W = cache
        return kernels.maxpool2x2_backward(np.ascontiguousarray(dy), arg, H, W), {}

    def spec(self):
        return {"type": self.kind, "pool": [2, 2]}


class BatchNorm(Layer):
    """Batch normalisation over the channel axis (images) or features (flat).

    Running statistics are updated only in training mode.
    """

    kind = "batchnorm"

    def __init__(self, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) not in (1, 3):
            raise DimensionError(f"batchnorm expects flat or (C, H, W) input, got {input_shape}")
        C = input_shape[0]
        self.params = {"gamma": np.ones(C, dtype=dtype), "beta": np.zeros(C, dtype=dtype)}
        self.buffers = {"running_mean": np.zeros(C, dtype=dtype),
                        "running_var": np.ones(C, dtype=dtype)}
        return input_shape

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, x, training=False, rng=None):
        axes = self._axes(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            n = x.size // x.shape[1]
            unbiased = var * (n / max(n - 1, 1))
            self.buffers["running_mean"] = (m * self.buffers["running_mean"]
                                            + (1 - m) * mean).astype(x.dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"]
                                           + (1 - m) * unbiased).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv, x)
        y = xhat * self._bcast(self.params["gamma"], x) + self._bcast(self.params["beta"], x)
        return y.astype(x.dtype, copy=False), (xhat, inv, training)

    def backward(self, dy, cache):
        xhat, inv, training = cache
        axes = self._axes(dy)
        grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        g = self._bcast(self.params["gamma"], dy)
        dxhat = dy * g
        if not training:
            return dxhat * self._bcast(inv, dy), grads
        n = dy.size // dy.shape[1]
        mean_d = dxhat.sum(axis=axes) / n
        mean_dx = (dxhat * xhat).sum(axis=axes) / n
        dx = (dxhat - self._bcast(mean_d, dy) - xhat * self._bcast(mean_dx, dy)) * self._bcast(inv, dy)
        return dx, grads

    def spec(self):
        return {"type": self.kind, "momentum": self.momentum, "eps": self.eps}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LSTM(Layer):
    """LSTM over a time-major ``(T, D)`` input; gate order i, f, g, o.

    Emits the full hidden sequence when ``return_sequences`` else the final
    hidden state.
    """

    kind = "lstm"

    def __init__(self, units: int, return_sequences: bool = False):
        super().__init__()
        if units < 1:
            raise ValueError("units must be positive")
        self.units = units
        self.return_sequences = return_sequences

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 2:
            raise DimensionError(f"lstm({self.units}) expects (T, D), got {input_shape}")
        T, D = input_shape
        H = self.units
        b = np.zeros(4 * H, dtype=dtype)
        b[H:2 * H] = 1.0  # forget-gate bias
        self.params = {
            "W": _glorot_uniform(rng, D, 4 * H, (D, 4 * H), dtype),
            "U": _glorot_uniform(rng, H, 4 * H, (H, 4 * H), dtype),
            "b": b,
        }
        return (T, H) if self.return_sequences else (H,)

    def forward(self, x, training=False, rng=None):
        N, T, D = x.shape
        H = self.units
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        xw = (x.reshape(N * T, D) @ W + b).reshape(N, T, 4 * H)
        h = np.zeros((N, H), dtype=x.dtype)
        c = np.zeros((N, H), dtype=x.dtype)
        hs = np.empty((N, T, H), dtype=x.dtype)
        cs = np.empty((N, T, H), dtype=x.dtype)
        gates = np.empty((N, T, 4 * H), dtype=x.dtype)
        for t in range(T):
            z = xw[:, t] + h @ U
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = _sigmoid(z[:, 3 * H:])
            c = f * c + i * g
            h = o * np.tanh(c)
            gates[:, t, :H], gates[:, t, H:2 * H] = i, f
            gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:] = g, o
            hs[:, t], cs[:, t] = h, c
        out = hs if self.return_sequences else hs[:, -1]
        return out, (x, hs, cs, gates)

    def backward(self, dy, cache):
        x, hs, cs, gates = cache
        N, T, D = x.shape
        H = self.units
        U = self.params["U"]
        if self.return_sequences:
            dhs = dy
        else:
            dhs = np.zeros_like(hs)
            dhs[:, -1] = dy
        dz = np.empty_like(gates)
        dh_next = np.zeros((N, H), dtype=x.dtype)
        dc_next = np.zeros((N, H), dtype=x.dtype)
        for t in range(T - 1, -1, -1):
            i, f = gates[:, t, :H], gates[:, t, H:2 * H]
            g, o = gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:]
            c = cs[:, t]
            c_prev = cs[:, t - 1] if t > 0 else np.zeros_like(c)
            tc = np.tanh(c)
            dh = dhs[:, t] + dh_next
            dc = dc_next + dh * o * (1 - tc * tc)
            dz[:, t, :H] = dc * g * i * (1 - i)
            dz[:, t, H:2 * H] = dc * c_prev * f * (1 - f)
            dz[:, t, 2 * H:3 * H] = dc * i * (1 - g * g)
            dz[:, t, 3 * H:] = dh * tc * o * (1 - o)
            dh_next = dz[:, t] @ U.T
            dc_next = dc * f
        h_prev = np.concatenate([np.zeros((N, 1, H), dtype=x.dtype), hs[:, :-1]], axis=1)
        dz2 = dz.reshape(N * T, 4 * H)
        grads = {
            "W": x.reshape(N * T, D).T @ dz2,
            "U": h_prev.reshape(N * T, H).T @ dz2,
            "b": dz2.sum(axis=0),
        }
        dx = (dz2 @ self.params["W"].T).reshape(N, T, D)
        return dx, grads

    def spec(self):
        return {"type": self.kind, "units": self.units, "return_sequences": self.return_sequences}


class ResidualBlock(Layer):
    """Residual unit: ``relu(main(x) + shortcut(x))``.

    ``bottleneck=False`` gives the two 3x3 convolution block; ``True`` the
    1x1 / 3x3 / 1x1 block with four-fold channel expansion. A projection
    shortcut (1x1 convolution + batchnorm) is used whenever the stride or
    channel count changes.
    """

    kind = "residual_block"

    def __init__(self, filters: int, stride: int = 1, bottleneck: bool = False):
        super().__init__()
        self.filters = filters
        self.stride = stride
        self.bottleneck = bottleneck
        self.main: list[Layer] = []
        self.shortcut: list[Layer] = []

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 3:
            raise DimensionError(f"residual_block expects (C, H, W), got {input_shape}")
        f, s = self.filters, self.stride
        if self.bottleneck:
            out_c = 4 * f
            self.main = [Conv2D(f, 1, 1, "valid", False), BatchNorm(), ReLU(),
                         Conv2D(f, 3, s, 1, False), BatchNorm(), ReLU(),
                         Conv2D(out_c, 1, 1, "valid", False), BatchNorm()]
        else:
            out_c = f
            self.main = [Conv2D(f, 3, s, 1, False), BatchNorm(), ReLU(),
                         Conv2D(f, 3, 1, 1, False), BatchNorm()]
        self.shortcut = []
        if s != 1 or input_shape[0] != out_c:
            self.shortcut = [Conv2D(out_c, 1, s, "valid", False), BatchNorm()]
        shape = input_shape
        for layer in self.main:
            shape = layer.build(shape, rng, dtype)
        sc_shape = input_shape
        for layer in self.shortcut:
            sc_shape = layer.build(sc_shape, rng, dtype)
        if tuple(shape) != tuple(sc_shape):
            raise DimensionError(f"residual_block main path {shape} != shortcut {sc_shape}")
        self._sync_params()
        return shape

    def _named_sublayers(self):
        for i, layer in enumerate(self.main):
            yield f"main.{i}", layer
        for i, layer in enumerate(self.shortcut):
            yield f"short.{i}", layer

    def _sync_params(self):
        # flat views of the sublayer dicts, keyed "main.0.W" etc.
        self.params = {f"{p}.{k}": v for p, l in self._named_sublayers() for k, v in l.params.items()}
        self.buffers = {f"{p}.{k}": v for p, l in self._named_sublayers() for k, v in l.buffers.items()}

    def _push_params(self):
        for p, layer in self._named_sublayers():
            for k in layer.params:
                layer.params[k] = self.params[f"{p}.{k}"]
            for k in layer.buffers:
                layer.buffers[k] = self.buffers[f"{p}.{k}"]

    def forward(self, x, training=False, rng=None):
        self._push_params()
        caches = []
        h = x
        for layer in self.main:
            h, c = layer.forward(h, training, rng)
            caches.append(c)
        sc = x
        sc_caches = []
        for layer in self.shortcut:
            sc, c = layer.forward(sc, training, rng)
            sc_caches.append(c)
        self._sync_params()  # batchnorm may have replaced running buffers
        z = h + sc
        mask = z > 0
        return z * mask, (caches, sc_caches, mask)

    def backward(self, dy, cache):
        caches, sc_caches, mask = cache
        dz = dy * mask
        grads = {}
        d = dz
        for i in range(len(self.main) - 1, -1, -1):
            d, g = self.main[i].backward(d, caches[i])
            grads.update({f"main.{i}.{k}": v for k, v in g.items()})
        ds = dz
        for i in range(len(self.shortcut) - 1, -1, -1):
            ds, g = self.shortcut[i].backward(ds, sc_caches[i])
            grads.update({f"short.{i}.{k}": v for k, v in g.items()})
        return d + ds, grads

    def astype(self, dtype):
        for _, layer in self._named_sublayers():
            layer.astype(dtype)
        self._sync_params()

    def spec(self):
        return {"type": self.kind, "filters": self.filters, "stride": self.stride,
                "bottleneck": self.bottleneck}


LAYER_TYPES = {cls.kind: cls for cls in (Dense, ReLU, Softmax, Dropout, Standardize, Flatten,
                                         ToImage, ToSequence, GlobalAvgPool, Conv2D, MaxPool2D,
                                         BatchNorm, LSTM, ResidualBlock)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    cls = LAYER_TYPES[spec.pop("type")]
    if cls is Conv2D and isinstance(spec.get("padding"), list):
        spec["padding"] = tuple(spec["padding"])
    if cls is MaxPool2D:
        spec.pop("pool", None)
    return cls(**spec)


# --------------------------------------------------------------------------
# Network

@dataclass
class ForwardCache:
    version: int
    layer_caches: list
    output: np.ndarray
    start: int


class Network:
    """An ordered stack of layers; the first ``frozen_prefix`` are frozen.

    Frozen layers never receive gradients and always run in inference mode
    (dropout off, batchnorm on running statistics).
    """

    def __init__(self, layers, input_shape, seed: int = 0, dtype=np.float32,
                 frozen_prefix: int = 0, build: bool = True):
        self.layers: list[Layer] = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self._version = 0
        self.frozen_prefix = 0
        if build:
            self._build(seed)
        self.set_frozen_prefix(frozen_prefix)

    def _build(self, seed):
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.build(shape, rng, self.dtype)
            except DimensionError as exc:
                raise DimensionError(f"layer {i} ({layer.kind}): {exc}") from None

    def set_frozen_prefix(self, n: int):
        if not 0 <= n <= len(self.layers):
            raise ValueError(f"frozen_prefix {n} out of range for {len(self.layers)} layers")
        self.frozen_prefix = n
        self._version += 1

    @property
    def output_shape(self):
        return self.layers[-1].output_shape if self.layers else self.input_shape

    def n_params(self, trainable_only: bool = False) -> int:
        start = self.frozen_prefix if trainable_only else 0
        return sum(layer.n_params() for layer in self.layers[start:])

    def parameters(self):
        """Iterate ``(key, layer_index, name, array)`` over every parameter."""
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"{i}.{name}", i, name, p

    def state_arrays(self):
        for i, layer in enumerate(self.layers):
            for name, a in layer.named_arrays():
                yield f"{i}.{name}", a

    def set_param(self, layer_index: int, name: str, value):
        layer = self.layers[layer_index]
        layer.params[name] = value
        if isinstance(layer, ResidualBlock):
            layer._push_params()
        self._version += 1

    def touch(self):
        """Invalidate outstanding forward caches."""
        self._version += 1

    def astype(self, dtype) -> "Network":
        self.dtype = np.dtype(dtype)
        for layer in self.layers:
            layer.astype(self.dtype)
        self._version += 1
        return self

    def forward(self, x, training: bool = False, rng=None):
        x = np.asarray(x, dtype=self.dtype)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"layer 0 ({self.layers[0].kind}): expected input shape "
                                 f"{self.input_shape}, got {tuple(x.shape[1:])}")
        caches = []
        for i, layer in enumerate(self.layers):
            x, c = layer.forward(x, training and i >= self.frozen_prefix, rng)
            caches.append(c)
        return x, ForwardCache(self._version, caches, x, 0)

    def predict(self, x, batch_size: int = 64):
        x = np.asarray(x, dtype=self.dtype)
        outs = [self.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0,) + self.output_shape, self.dtype)

    def backward(self, cache: ForwardCache, dy, from_logits: bool = False,
                 input_grad: bool = False):
        """Gradients of every parameter in the unfrozen suffix.

        With ``from_logits`` the final layer must be a softmax and ``dy`` is
        taken with respect to its input. With ``input_grad`` the gradient is
        propagated through the frozen prefix as well and ``(grads, dx)`` is
        returned.
        """
        if cache.version != self._version:
            raise StaleCacheError("forward cache is stale: parameters changed since the forward pass")
        last = len(self.layers) - 1
        if from_logits:
            if not isinstance(self.layers[-1], Softmax):
                raise ValueError("from_logits requires a final softmax layer")
            last -= 1
        stop = 0 if input_grad else self.frozen_prefix
        grads = {}
        d = np.asarray(dy, dtype=self.dtype)
        for i in range(last, stop - 1, -1):
            d, g = self.layers[i].backward(d, cache.layer_caches[i])
            if i >= self.frozen_prefix:
                for name, v in g.items():
                    grads[f"{i}.{name}"] = v
        return (grads, d) if input_grad else grads

    def describe(self) -> str:
        doc = {"input_shape": list(self.input_shape), "frozen_prefix": self.frozen_prefix,
               "dtype": self.dtype.name, "seed": self.seed,
               "layers": [layer.spec() for layer in self.layers]}
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_description(cls, text: str) -> "Network":
        doc = json.loads(text)
        layers = [layer_from_spec(s) for s in doc["layers"]]
        return cls(layers, doc["input_shape"], seed=doc.get("seed", 0),
                   dtype=np.dtype(doc.get("dtype", "float32")),
                   frozen_prefix=doc["frozen_prefix"])

    def copy(self) -> "Network":
        net = Network.from_description(self.describe())
        for (key, a), (_, b) in zip(self.state_arrays(), net.state_arrays()):
            b[...] = a
        return net

    def __repr__(self):
        body = ", ".join(repr(layer) for layer in self.layers)
        return f"Network(input={self.input_shape}, frozen={self.frozen_prefix}, [{body}])"


def truncate(net: Network, n_layers: int) -> Network:
    """A new network holding copies of the first ``n_layers`` layers."""
    doc = json.loads(net.describe())
    doc["layers"] = doc["layers"][:n_layers]
    doc["frozen_prefix"] = min(doc["frozen_prefix"], n_layers)
    out = Network.from_description(json.dumps(doc))
    src = dict(net.state_arrays())
    for key, a in out.state_arrays():
        a[...] = src[key]
    return out


# --------------------------------------------------------------------------
# Loss and training

def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs[np.arange(len(labels)), labels], 1e-30, None)
    return float(-np.mean(np.log(p.astype(np.float64))))


def one_hot(labels, n_classes, dtype=np.float32):
    out = np.zeros((len(labels), n_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 70
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    loss: str = "cross_entropy"
    l2: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss != "cross_entropy":
            raise ValueError(f"unknown loss {self.loss!r}")


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, net: Network, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for key, i, name, p in list(net.parameters()):
            if key not in grads:
                continue
            g = grads[key].astype(p.dtype, copy=False)
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            v = self.v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (scale * m / (np.sqrt(v) + self.eps)).astype(p.dtype)
        _after_step(net)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, net: Network, grads: dict):
        for key, i, name, p in list(net.parameters()):
            if key in grads:
                p -= (self.lr * grads[key]).astype(p.dtype)
        _after_step(net)


def _after_step(net: Network):
    for layer in net.layers:
        if isinstance(layer, ResidualBlock):
            layer._push_params()
    net.touch()


def train(net: Network, X, y, cfg: TrainConfig, log=None):
    """Mini-batch training on softmax cross-entropy; returns the loss history.

    ``y`` holds integer class labels. Batches are reshuffled each epoch from
    an rng seeded by ``cfg.seed``; the same rng drives dropout.
    """
    X = np.asarray(X, dtype=net.dtype)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty training set")
    if len(X) != len(y):
        raise ValueError("X and y lengths differ")
    n_classes = net.output_shape[-1]
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps) if cfg.optimizer == "adam" \
        else SGD(cfg.learning_rate)
    bs = min(cfg.batch_size, len(X))
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for b, lo in enumerate(range(0, len(X), bs)):
            idx = order[lo:lo + bs]
            probs, cache = net.forward(X[idx], training=True, rng=rng)
            loss = cross_entropy(probs, y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            dlogits = (probs - one_hot(y[idx], n_classes, net.dtype)) / len(idx)
            grads = net.backward(cache, dlogits, from_logits=True)
            if cfg.l2:
                for key, i, name, p in net.parameters():
                    if key in grads and name.endswith("W"):
                        grads[key] = grads[key] + cfg.l2 * p
            opt.step(net, grads)
            total += loss * len(idx)
        history.append(total / len(X))
        if log is not None:
            log(epoch, history[-1])
    return net, history


# --------------------------------------------------------------------------
# Gradient checking

def grad_check(net: Network, x, label=None, n_per_layer: int = 100, h: float = 1e-5,
               seed: int = 0, check_input: bool = True) -> float:
    """Largest relative error between backward and central differences.

    Uses softmax cross-entropy against ``label`` when the network ends in a
    softmax, otherwise the linear probe ``sum(out * R)`` with a fixed random
    ``R``. Relative error is ``|a - n| / max(|a|, |n|, floor)`` where the floor
    is the larger of ``1e-3`` times the largest analytic gradient magnitude in
    the same tensor and ``1e-4`` times the largest anywhere in the network
    (at least 1e-8). Entries many orders below their tensor's scale, and
    tensors whose gradient is exactly zero such as a bias feeding a
    batchnorm, are then not judged on finite-difference round-off alone.
    Layers run in training mode with a re-seeded rng so dropout masks repeat
    exactly.
    """
    if net.dtype != np.float64:
        raise ValueError("grad_check needs a float64 network (net.astype(np.float64))")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    uses_softmax = isinstance(net.layers[-1], Softmax) and label is not None
    label = None if not uses_softmax else np.asarray(label, dtype=np.int64)
    probe = rng.normal(size=(len(x),) + net.output_shape)

    def loss_of(inp):
        out, cache = net.forward(inp, training=True, rng=np.random.default_rng(seed + 1))
        if uses_softmax:
            return cross_entropy(out, label), out, cache
        return float((out * probe).sum()), out, cache

    _, out, cache = loss_of(x)
    if uses_softmax:
        dy = (out - one_hot(label, out.shape[-1], np.float64)) / len(x)
        grads, dx = net.backward(cache, dy, from_logits=True, input_grad=True)
    else:
        grads, dx = net.backward(cache, probe, input_grad=True)

    def rel(a, n, floor):
        return abs(a - n) / max(abs(a), abs(n), floor)

    overall = max([float(np.abs(g).max(initial=0.0)) for g in grads.values()]
                  + [float(np.abs(dx).max(initial=0.0))])

    def floor_of(g):
        return max(1e-8, 1e-3 * float(np.abs(g).max(initial=0.0)), 1e-4 * overall)

    worst = 0.0
    for key, i, name, p in list(net.parameters()):
        if i < net.frozen_prefix:
            continue
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_per_layer, flat.size), replace=False)
        g = grads[key].reshape(-1)
        floor = floor_of(g)
        for j in picks:
            old = flat[j]
            flat[j] = old + h
            lp = loss_of(x)[0]
            flat[j] = old - h
            lm = loss_of(x)[0]
            flat[j] = old
            worst = max(worst, rel(g[j], (lp - lm) / (2 * h), floor))
    if check_input:
        xf = x.reshape(-1)
        dxf = dx.reshape(-1)
        floor = floor_of(dxf)
        for j in rng.choice(xf.size, size=min(n_per_layer, xf.size), replace=False):
            old = xf[j]
            xf[j] = old + h
            lp = loss_of(x)[0]
            xf[j] = old - h
            lm = loss_of(x)[0]
            xf[j] = old
            worst = max(worst, rel(dxf[j], (lp - lm) / (2 * h), floor))
    net.touch()
    return worst


# --------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_MAGIC = b"VSNN"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_container(path, description: str, tensors, dtype_code: int = 0) -> None:
    """Write ``VSNN`` | u32 version | u32 len + UTF-8 description | u32 count |
    per tensor: u16 len + name, u8 dtype code, u8 ndim, u32 dims, raw data."""
    dt = _DTYPE_CODES[dtype_code]
    desc = description.encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(desc)), desc]
    tensors = list(tensors)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        a = np.ascontiguousarray(arr, dtype=dt)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", dtype_code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path):
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a VSNN checkpoint")
    version, dlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    description = blob[pos:pos + dlen].decode("utf-8")
    pos += dlen
    (count,) = struct.unpack("<I", blob[pos:pos + 4])
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", blob[pos:pos + 2])
        name = blob[pos + 2:pos + 2 + nlen].decode("utf-8")
        pos += 2 + nlen
        code, ndim = struct.unpack("<BB", blob[pos:pos + 2])
        pos += 2
        shape = struct.unpack(f"<{ndim}I", blob[pos:pos + 4 * ndim])
        pos += 4 * ndim
        dt = _DTYPE_CODES[code]
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob[pos:pos + n * dt.itemsize], dtype=dt).reshape(shape).copy()
        pos += n * dt.itemsize
    return description, tensors


def save_checkpoint(net: Network, path) -> None:
    write_container(path, net.describe(), net.state_arrays(), dtype_code=0)


def load_checkpoint(path) -> Network:
    description, tensors = read_container(path)
    net = Network.from_description(description)
    for key, a in net.state_arrays():
        if key not in tensors:
            raise ValueError(f"{path}: missing tensor {key}")
        a[...] = tensors[key]
    net.touch()
    return net
