"""Executable layer chains built from architecture strings."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import arch as A
from .layers import SPP, Conv2d, Flatten, Linear, MaxPool2d, ReLU, ShapeError


class Sequential:
    """A chain of layers compiled from an expanded :class:`~patchcompare.arch.ArchSpec`.

    :param spec: architecture (string or parsed spec); stacks are expanded.
    :param input_shape: ``(c, H, W)`` for spatial inputs or ``(n,)`` for flat ones.
        For SPP chains the spatial extent is only used to size the layers
        after the SPP, which do not depend on it.
    """

    def __init__(self, spec, input_shape, rng=None, dtype=np.float32):
        if isinstance(spec, str):
            spec = A.parse_arch(spec)
        self.spec = A.expand_stacks(spec)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.shapes = A.infer_shapes(self.spec, self.input_shape) if len(self.input_shape) == 3 \
            else self._flat_shapes()
        self.layers = []
        # index into self.layers of each descriptor (Flatten is extra)
        self.descriptor_layers = []
        shape = self.input_shape
        for d, out_shape in zip(self.spec.layers, self.shapes):
            if isinstance(d, A.Conv):
                layer = Conv2d(shape[0], d.n, d.k, d.s, rng=rng, dtype=dtype)
            elif isinstance(d, A.Pool):
                layer = MaxPool2d(d.k, d.s)
            elif isinstance(d, A.ReLU):
                layer = ReLU()
            elif isinstance(d, A.SPP):
                layer = SPP(d.g)
            elif isinstance(d, A.FC):
                if len(shape) == 3:
                    flat = Flatten()
                    flat.spatial_shape = shape
                    self.layers.append(flat)
                    shape = (int(np.prod(shape)),)
                layer = Linear(shape[0], d.n, rng=rng, dtype=dtype)
            else:
                raise A.ArchError(f"cannot build {d!r}")
            self.layers.append(layer)
            self.descriptor_layers.append(len(self.layers) - 1)
            shape = out_shape
        self.output_shape = shape

    def _flat_shapes(self):
        shapes, n = [], self.input_shape[0]
        for d in self.spec.layers:
            if isinstance(d, A.FC):
                n = d.n
            elif not isinstance(d, A.ReLU):
                raise A.ArchError(f"{d.render()} needs a spatial input")
            shapes.append((n,))
        return shapes

    @property
    def arch(self) -> str:
        return A.render_arch(self.spec)

    @property
    def stride(self) -> int:
        return A.net_stride(self.spec)

    def __repr__(self):
        return f"Sequential({self.arch!r}, input_shape={self.input_shape})"

    def forward(self, x, record_shapes=False):
        shapes = []
        for layer in self.layers:
            x = layer.forward(x)
            if record_shapes:
                shapes.append(x.shape[1:])
        if record_shapes:
            return x, [shapes[i] for i in self.descriptor_layers]
        return x

    def backward(self, g):
        """Backpropagate ``g`` and accumulate parameter gradients into each layer."""
        for layer in reversed(self.layers):
            g, grads = layer.backward(g)
            layer.accumulate(grads)
        return g

    def parameters(self):
        """Yield ``(name, layer, key)`` for every parameter array."""
        for i, layer in enumerate(self.layers):
            for key in layer.params:
                yield f"{i}.{layer.kind}.{key}", layer, key

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def clear_cache(self):
        for layer in self.layers:
            layer.clear_cache()

    # -- fully convolutional evaluation -------------------------------------

    def forward_dense(self, x, window=None):
        """Evaluate on a large ``C x H x W`` map, treating FC layers as convolutions.

        The result is ``L x h x w`` where entry ``(:, i, j)`` equals the chain
        output on the window whose top-left corner is ``(i*stride, j*stride)``.
        ``window`` (the training input side) is needed when the chain has an
        SPP layer, whose pooling cells depend on the window size.
        """
        x = np.asarray(x, dtype=self.dtype)[None]
        for layer in self.layers:
            if isinstance(layer, (Conv2d, MaxPool2d, ReLU)):
                x = layer.forward(x)
            elif isinstance(layer, Flatten):
                continue
            elif isinstance(layer, SPP):
                if window is None:
                    raise ShapeError("forward_dense through SPP needs the window size")
                x = self._dense_spp(layer, x, window)
            elif isinstance(layer, Linear):
                W = layer.params["weight"]
                c = x.shape[1]
                if c == layer.n_in:
                    kernel = W.reshape(layer.n_out, c, 1, 1)
                else:
                    kh, kw = self._fc_window(c, layer.n_in // c)
                    kernel = W.reshape(layer.n_out, c, kh, kw)
                x = _conv_rect(x, kernel, layer.params["bias"])
            else:
                raise ShapeError(f"forward_dense: unsupported layer {layer!r}")
        return x[0]

    def _fc_window(self, c, area):
        for layer in self.layers:
            if isinstance(layer, Flatten):
                sc, h, w = layer.spatial_shape
                if sc == c and h * w == area:
                    return h, w
        raise ShapeError("cannot map FC weights onto a spatial kernel")

    def _dense_spp(self, layer, x, window):
        """SPP applied to every window-sized block of the trunk output."""
        # extent of the trunk output for one window
        trunk = [d for d in self.spec.layers]
        idx = next(i for i, d in enumerate(trunk) if isinstance(d, A.SPP))
        sub = A.ArchSpec(tuple(trunk[:idx]))
        if idx == 0:
            fh = fw = window
        else:
            _, fh, fw = A.infer_shapes(sub, (self.input_shape[0], window, window))[-1]
        blocks = sliding_window_view(x[0], (fh, fw), axis=(1, 2))  # C x nY x nX x fh x fw
        C, nY, nX = blocks.shape[:3]
        flat = blocks.transpose(1, 2, 0, 3, 4).reshape(nY * nX, C, fh, fw)
        out = SPP(layer.g).forward(flat)  # (nY*nX) x C*g*g
        return out.T.reshape(1, -1, nY, nX)


def _conv_rect(x, kernel, bias):
    """Stride-1 valid correlation with a possibly non-square kernel."""
    kh, kw = kernel.shape[2:]
    cols = sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.tensordot(cols, kernel, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2) + bias[None, :, None, None])


def dense_field(net: Sequential, image, window: int):
    """Chain output for every ``window x window`` sub-window of ``image``.

    Returns ``L x (H-window+1) x (W-window+1)``. Full coverage is obtained
    with ``stride**2`` shifted fully convolutional passes. When the chain ends
    on an ``oh x ow`` map, each window's entry is its output block flattened
    in (channel, row, column) order, as in :class:`Flatten`.
    """
    image = np.asarray(image, dtype=net.dtype)
    if image.ndim == 2:
        image = image[None]
    C, H, W = image.shape
    if H < window or W < window:
        raise ShapeError(f"image {H}x{W} is smaller than the {window}x{window} window")
    s = net.stride
    nh, nw = H - window + 1, W - window + 1
    # chains ending on a spatial map give each window an oh x ow output block
    oshape = A.infer_shapes(net.spec, (C, window, window))[-1] if len(net.input_shape) == 3 else (1,)
    oh, ow = oshape[1:] if len(oshape) == 3 else (1, 1)
    field = None
    for dy in range(min(s, nh)):
        for dx in range(min(s, nw)):
            out = net.forward_dense(image[:, dy:, dx:], window=window)
            if (oh, ow) != (1, 1):
                blocks = sliding_window_view(out, (oh, ow), axis=(1, 2))
                out = blocks.transpose(0, 3, 4, 1, 2).reshape(-1, *blocks.shape[1:3])
            ry = len(range(dy, nh, s))
            rx = len(range(dx, nw, s))
            if field is None:
                field = np.empty((out.shape[0], nh, nw), dtype=out.dtype)
            field[:, dy::s, dx::s] = out[:, :ry, :rx]
    net.clear_cache()
    return field
