"""Layer math with cached forward state and exact backward passes.

Every layer works on batched arrays: feature maps are ``N x C x H x W`` and
vectors are ``N x L``. ``backward`` returns ``(grad_input, grad_params)`` and
needs the cache left behind by the most recent ``forward``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an input does not fit a layer."""


class CacheError(RuntimeError):
    """Raised when backward is called without a preceding forward."""


def conv_output_size(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


def _check_window(x, k, s, what):
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected an N x C x H x W array, got shape {x.shape}")
    H, W = x.shape[2:]
    if H < k:
        raise ShapeError(f"{what}: height {H} is smaller than window {k}")
    if W < k:
        raise ShapeError(f"{what}: width {W} is smaller than window {k}")
    ho, wo = conv_output_size(H, k, s), conv_output_size(W, k, s)
    if ho < 1 or wo < 1:
        raise ShapeError(f"{what}: stride {s} too large for {H}x{W} input")
    return ho, wo


def uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = "Layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def accumulate(self, grads):
        for k, g in grads.items():
            if k in self.grads:
                self.grads[k] += g
            else:
                self.grads[k] = g.copy()

    def clear_cache(self):
        self._cache = None

    def _require_cache(self):
        if self._cache is None:
            raise CacheError(f"{self.kind}: backward called before forward")
        return self._cache

    def __repr__(self):
        return f"{type(self).__name__}({self.describe()})"

    def describe(self) -> str:
        return ""


class Conv2d(Layer):
    """Valid (unpadded) cross-correlation with per-filter bias."""

    kind = "Conv"

    def __init__(self, in_channels, n, k, s=1, rng=None, dtype=np.float32, weight=None, bias=None):
        super().__init__()
        self.in_channels, self.n, self.k, self.s = in_channels, n, k, s
        fan_in = in_channels * k * k
        rng = rng if rng is not None else np.random.default_rng(0)
        if weight is None:
            weight = uniform_init(rng, (n, in_channels, k, k), fan_in, dtype)
        if bias is None:
            bias = uniform_init(rng, (n,), fan_in, dtype)
        weight, bias = np.asarray(weight, dtype=dtype), np.asarray(bias, dtype=dtype)
        if weight.shape != (n, in_channels, k, k):
            raise ShapeError(f"Conv weight must be {(n, in_channels, k, k)}, got {weight.shape}")
        if bias.shape != (n,):
            raise ShapeError(f"Conv bias length must be {n}, got {bias.shape}")
        self.params = {"weight": weight, "bias": bias}

    def describe(self):
        return f"{self.in_channels}->{self.n}, k={self.k}, s={self.s}"

    def forward(self, x):
        ho, wo = _check_window(x, self.k, self.s, "Conv")
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"Conv: channel dimension mismatch, expected {self.in_channels} got {x.shape[1]}")
        k, s = self.k, self.s
        cols = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        out = np.tensordot(cols, self.params["weight"], axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + self.params["bias"][None, :, None, None]
        self._cache = (x.shape, cols)
        return np.ascontiguousarray(out)

    def backward(self, g):
        in_shape, cols = self._require_cache()
        k, s = self.k, self.s
        W = self.params["weight"]
        ho, wo = g.shape[2:]
        grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = g.sum(axis=(0, 2, 3))
        # N x ho x wo x C x k x k
        dcols = np.tensordot(g, W, axes=([1], [0]))
        dx = np.zeros(in_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, {"weight": grad_w, "bias": grad_b}


class MaxPool2d(Layer):
    """Max pooling; ties go to the smallest linear input index."""

    kind = "MaxPool"

    def __init__(self, k, s):
        super().__init__()
        self.k, self.s = k, s

    def describe(self):
        return f"k={self.k}, s={self.s}"

    def forward(self, x):
        ho, wo = _check_window(x, self.k, self.s, "MaxPool")
        N, C, H, W = x.shape
        k, s = self.k, self.s
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        flat = win.reshape(N, C, ho, wo, k * k)
        am = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]
        oy = np.arange(ho)[:, None] * s
        ox = np.arange(wo)[None, :] * s
        # linear index into the H x W plane of each channel
        argmax = (oy + am // k) * W + (ox + am % k)
        self._cache = (x.shape, argmax)
        return out

    @property
    def argmax(self):
        return self._require_cache()[1]

    def backward(self, g):
        in_shape, argmax = self._require_cache()
        return _route(g, argmax, in_shape), {}


def _route(g, argmax, in_shape):
    """Scatter-add ``g`` onto the cached argmax positions."""
    N, C, H, W = in_shape
    base = (np.arange(N)[:, None] * C + np.arange(C)[None, :]) * (H * W)
    flat = (argmax.reshape(N, C, -1) + base[:, :, None]).ravel()
    dx = np.bincount(flat, weights=g.reshape(-1), minlength=N * C * H * W)
    return dx.astype(g.dtype, copy=False).reshape(in_shape)


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, g):
        mask = self._require_cache()
        return g * mask, {}


class Linear(Layer):
    """``y = W x + b`` on ``N x in`` inputs."""

    kind = "Linear"

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32, weight=None, bias=None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng if rng is not None else np.random.default_rng(0)
        if weight is None:
            weight = uniform_init(rng, (n_out, n_in), n_in, dtype)
        if bias is None:
            bias = uniform_init(rng, (n_out,), n_in, dtype)
        weight, bias = np.asarray(weight, dtype=dtype), np.asarray(bias, dtype=dtype)
        if weight.shape != (n_out, n_in) or bias.shape != (n_out,):
            raise ShapeError(
                f"Linear expects weight {(n_out, n_in)} and bias {(n_out,)}, "
                f"got {weight.shape} and {bias.shape}")
        self.params = {"weight": weight, "bias": bias}

    def describe(self):
        return f"{self.n_in}->{self.n_out}"

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"Linear: input dimension mismatch, expected {self.n_in} got shape {x.shape}")
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, g):
        x = self._require_cache()
        W = self.params["weight"]
        return g @ W, {"weight": g.T @ x, "bias": g.sum(axis=0)}


class Flatten(Layer):
    kind = "Flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        shape = self._require_cache()
        return g.reshape(shape), {}


def spp_bounds(n: int, g: int) -> list[int]:
    return [(i * n) // g for i in range(g + 1)]


class SPP(Layer):
    """Single-level spatial pyramid pooling on a g x g grid of max cells.

    Output per sample has length ``C*g*g`` ordered (channel, cell row, cell col).
    """

    kind = "SPP"

    def __init__(self, g):
        super().__init__()
        self.g = g

    def describe(self):
        return f"g={self.g}"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"SPP: expected an N x C x H x W array, got shape {x.shape}")
        N, C, H, W = x.shape
        g = self.g
        if H < g or W < g:
            raise ShapeError(f"SPP: input {H}x{W} is smaller than grid {g}x{g}")
        ys, xs = spp_bounds(H, g), spp_bounds(W, g)
        out = np.empty((N, C, g, g), dtype=x.dtype)
        argmax = np.empty((N, C, g, g), dtype=np.int64)
        for i in range(g):
            for j in range(g):
                y0, y1, x0, x1 = ys[i], ys[i + 1], xs[j], xs[j + 1]
                cell = x[:, :, y0:y1, x0:x1].reshape(N, C, -1)
                am = cell.argmax(axis=-1)
                out[:, :, i, j] = np.take_along_axis(cell, am[..., None], axis=-1)[..., 0]
                cw = x1 - x0
                argmax[:, :, i, j] = (y0 + am // cw) * W + (x0 + am % cw)
        self._cache = (x.shape, argmax)
        return out.reshape(N, C * g * g)

    def backward(self, g):
        in_shape, argmax = self._require_cache()
        N, C = in_shape[:2]
        return _route(g.reshape(N, C, self.g, self.g), argmax, in_shape), {}


# single-tensor convenience wrappers (c x H x W feature maps, flat vectors)

def conv2d(x, weight, bias, stride=1):
    weight = np.asarray(weight)
    n, c, k, _ = weight.shape
    layer = Conv2d(c, n, k, stride, dtype=weight.dtype, weight=weight, bias=bias)
    return layer.forward(np.asarray(x)[None])[0]


def max_pool2d(x, k, s, return_argmax=False):
    layer = MaxPool2d(k, s)
    out = layer.forward(np.asarray(x)[None])[0]
    if return_argmax:
        return out, layer.argmax[0]
    return out


def relu(x):
    return np.maximum(x, 0)


def linear(x, weight, bias):
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    x = np.asarray(x, dtype=weight.dtype)
    if x.ndim != 1 or x.shape[0] != weight.shape[1]:
        raise ShapeError(f"linear: input dimension mismatch, expected {weight.shape[1]} got {x.shape}")
    return weight @ x + bias


def spp_pool(x, g):
    return SPP(g).forward(np.asarray(x)[None])[0]


def l2_normalize(v, axis=-1):
    """Scale to unit Euclidean norm along ``axis``; zero vectors are an error."""
    v = np.asarray(v)
    norm = np.sqrt(np.sum(v.astype(np.float64) ** 2, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize: cannot normalize a zero vector")
    return (v / norm).astype(v.dtype if v.dtype.kind == "f" else np.float64)


def backward(layer: Layer, grad_output):
    return layer.backward(grad_output)
