"""Parameter containers and the conv layer used by both networks."""

from __future__ import annotations

import copy

import numpy as np

from ..errors import ShapeError, StateError
from . import functional as F
from .tensor import Tensor, get_dtype


class Parameter(Tensor):
    """A trainable leaf tensor. Its dotted name is assigned by the owning Module."""

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=get_dtype()), requires_grad=True, name=name)


class Module:
    """Minimal module tree: parameters are discovered from instance attributes."""

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix):
        for name, p in self.named_parameters(prefix + "."):
            p.name = name
        return self

    def zero_grads(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state, strict=True):
        params = {p.name: p for p in self.parameters()}
        missing = set(params) - set(state)
        if strict and missing:
            raise StateError(f"missing parameters: {sorted(missing)}")
        for name, value in state.items():
            if name not in params:
                if strict:
                    raise StateError(f"unexpected parameter {name!r}")
                continue
            p = params[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)

    def clone(self):
        """Deep copy with fresh parameter buffers and no gradients."""
        twin = copy.deepcopy(self)
        twin.zero_grads()
        return twin

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng, shape, gain=np.sqrt(2.0)):
    fan_in = int(np.prod(shape[1:]))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, rng=None, gain=np.sqrt(2.0)):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k), gain))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def zero_init(self):
        self.weight.data[...] = 0
        self.bias.data[...] = 0
