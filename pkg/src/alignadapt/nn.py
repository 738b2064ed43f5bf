"""Parameter containers built on the tensor ops."""
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameters are Tensor attributes, children are Module attributes."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return sum(int(np.prod(p.shape)) for p in self.parameters())


def _param(arr, dtype):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32, bias=True, scale=1.0):
        self.weight = _param(rng.standard_normal((d_in, d_out)) * (scale / math.sqrt(d_in)), dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float32, eps=1e-5):
        self.gain = _param(np.ones(d), dtype)
        self.bias = _param(np.zeros(d), dtype)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Two-layer perceptron with a GELU between the layers.

    With ``skip=True`` the input is added to the output and the second layer
    starts at zero, so a fresh module is the identity map.
    """

    def __init__(self, d_in, d_hidden, d_out, rng, dtype=np.float32, skip=False):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype, scale=0.0 if skip else 1.0)
        self.skip = skip
        if skip and d_in != d_out:
            raise ValueError("skip MLP needs d_in == d_out")

    def __call__(self, x):
        h = self.fc2(T.gelu(self.fc1(x)))
        return x + h if self.skip else h


class Attention(Module):
    """Multi-head attention. ``out_scale=0`` starts the output projection at zero."""

    def __init__(self, d, heads, rng, dtype=np.float32, out_scale=1.0):
        self.heads = heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype, scale=out_scale)

    def __call__(self, q, k=None, v=None):
        k = q if k is None else k
        v = k if v is None else v
        return T.multi_head_attention(
            q, k, v, self.heads,
            self.q.weight, self.q.bias, self.k.weight, self.k.bias,
            self.v.weight, self.v.bias, self.o.weight, self.o.bias)


class TemporalConv(Module):
    def __init__(self, d, kernel_size, rng, dtype=np.float32, scale=0.5):
        if kernel_size % 2 == 0:
            from .errors import ParameterError
            raise ParameterError(f"kernel_size must be odd, got {kernel_size}")
        std = scale / math.sqrt(kernel_size * d)
        self.kernels = _param(rng.standard_normal((kernel_size, d, d)) * std, dtype)

    def __call__(self, x):
        return T.conv1d_temporal(x, self.kernels)
