"""Differentiable primitives.

Each function returns a new Tensor and attaches a backward rule mapping the
upstream gradient to a tuple with one entry per operand.  Binary elementwise
ops follow numpy broadcasting; gradients are summed back to operand shapes.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, get_dtype

_make = Tensor._make


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None
    return a, b


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b):
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        gb = g / b.data
        return gb, -gb * out

    return _make(out, (a, b), backward, "div")


def power(x, exponent):
    exponent = float(exponent)
    out = x.data ** exponent
    return _make(out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1.0),), "power")


def sqrt(x):
    out = np.sqrt(x.data)

    def backward(g):
        # subgradient 0 at the origin keeps flat regions NaN-free
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _make(out, (x,), backward, "sqrt")


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def absolute(x):
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def clip(x, lo=None, hi=None):
    """Clamp values; gradient passes only where the input was inside the range."""
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _make(out, (x,), lambda g: (g * inside,), "clip")


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope=0.2):
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x):
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def activation(kind, x):
    kinds = {"relu": relu, "leaky_relu": leaky_relu, "sigmoid": sigmoid, "tanh": tanh}
    if kind not in kinds:
        raise ValueError(f"unknown activation {kind!r}")
    return kinds[kind](x)


# -- reductions and shape ------------------------------------------------

def _axes(x, axis):
    if axis is None:
        return tuple(range(x.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % x.ndim for a in axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    axes = _axes(x, axis)
    if x.size == 0:
        raise ShapeError("empty reduction")
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    axes = _axes(x, axis)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if x.size == 0 or count == 0:
        raise ShapeError("empty reduction")
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _make(out, (x,), backward, "mean")


def reduce(kind, x, axes=None):
    if kind == "sum":
        return sum(x, axes)
    if kind == "mean":
        return mean(x, axes)
    raise ValueError(f"unknown reduction {kind!r}")


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes):
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def pad_edge(x, pad_h, pad_w):
    """Replicate-pad the last two axes by (pad_h, pad_w) at the bottom/right."""
    if pad_h == 0 and pad_w == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(0, pad_h), (0, pad_w)]
    out = np.pad(x.data, width, mode="edge")
    h, w = x.shape[-2:]

    def backward(g):
        gx = g[..., :h, :w].copy()
        gx[..., h - 1, :] += g[..., h:, :w].sum(axis=-2)
        gx[..., :, w - 1] += g[..., :h, w:].sum(axis=-1)
        gx[..., h - 1, w - 1] += g[..., h:, w:].sum(axis=(-2, -1))
        return (gx,)

    return _make(out, (x,), backward, "pad_edge")


# -- image ops -----------------------------------------------------------

def conv_output_size(size, k, stride, padding):
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(f"conv extent {size} with kernel {k}, stride {stride}, padding {padding} is not integral")
    return span // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw] via im2col and one matmul."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d input {x.shape} incompatible with kernel {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel extents must be odd")
    if padding < 0 or stride < 1:
        raise ShapeError("conv2d needs padding >= 0 and stride >= 1")
    B, _, H, W = x.shape
    ho = conv_output_size(H, kh, stride, padding)
    wo = conv_output_size(W, kw, stride, padding)

    # channel-major layout: columns are [cin, kh, kw, B, ho, wo]
    xp = x.data.transpose(1, 0, 2, 3)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == kw == 1 and stride == 1:
        cols = np.ascontiguousarray(xp).reshape(cin, -1)
    else:
        cols = np.empty((cin, kh, kw, B, ho, wo), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(cin * kh * kw, B * ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data.reshape(cout, 1)
    out = out.reshape(cout, B, ho, wo)
    out = out[:, 0][None] if B == 1 else np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gmat = g[0].reshape(cout, -1) if B == 1 else g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(cin, kh, kw, B, ho, wo)
            gxp = np.zeros((cin, B, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            if padding:
                gxp = gxp[:, :, padding:padding + H, padding:padding + W]
            gx = gxp.transpose(1, 0, 2, 3)
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def upsample_nearest2x(x):
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        s = g.shape
        return (g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1)),)

    return _make(out, (x,), backward, "upsample_nearest2x")


def max_pool2x(x):
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""
    *lead, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2x needs even extents, got {H}x{W}")
    blocks = x.data.reshape(*lead, H // 2, 2, W // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, H // 2, W // 2, 2, 2)
        return (np.moveaxis(gb, -2, -3).reshape(x.shape),)

    return _make(out, (x,), backward, "max_pool2x")


def softmax_channels(x):
    """Softmax over axis 1 of a [B,K,H,W] tensor, max-subtracted for stability."""
    if x.ndim != 4 or x.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs [B,K>=2,H,W], got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax_channels")


def constant(value, shape):
    return Tensor(np.full(shape, value, dtype=get_dtype()))
