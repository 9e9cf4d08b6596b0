"""Dense tensor with define-by-run reverse-mode differentiation.

Every op builds a new :class:`Tensor` whose ``_parents`` point at its operands
and whose ``_backward`` maps the upstream gradient to one gradient per parent.
Calling :meth:`Tensor.backward` on a scalar orders the recorded graph
topologically (operands before results) and visits each node exactly once.
The graph is discarded with the tensors; nothing is reused between passes.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import NumericError, ShapeError

_dtype = np.float32


def get_dtype():
    return _dtype


def set_dtype(dtype):
    """Select the floating type used for all newly created tensors."""
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype, e.g. ``with precision(np.float64)``."""
    old = _dtype
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


def check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    return data


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, _op=""):
        self.data = np.ascontiguousarray(data, dtype=_dtype) if _op == "" else data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @classmethod
    def _make(cls, data, parents, backward, op):
        """Wrap an op result; records graph edges only if some operand needs grad."""
        with np.errstate(all="ignore"):
            data = np.asarray(data, dtype=_dtype)
        check_finite(data, op)
        if any(p.requires_grad for p in parents):
            return cls(data, True, None, tuple(parents), backward, op)
        return cls(data, False, None, (), None, op)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}{', op=' + self._op if self._op else ''})"

    # -- differentiation --------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operator sugar (implementations live in functional) ---------------
    def __add__(self, other):
        return _F().add(self, other)

    def __radd__(self, other):
        return _F().add(other, self)

    def __sub__(self, other):
        return _F().sub(self, other)

    def __rsub__(self, other):
        return _F().sub(other, self)

    def __mul__(self, other):
        return _F().mul(self, other)

    def __rmul__(self, other):
        return _F().mul(other, self)

    def __truediv__(self, other):
        return _F().div(self, other)

    def __rtruediv__(self, other):
        return _F().div(other, self)

    def __neg__(self):
        return _F().mul(self, -1.0)

    def __pow__(self, exponent):
        return _F().power(self, exponent)

    def __matmul__(self, other):
        return _F().matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return _F().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _F().mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _F().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _F().transpose(self, axes)


def _not_scalar(t):
    raise ShapeError(f"item() on non-scalar tensor of shape {t.shape}")


def _F():
    from . import functional

    return functional


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order
