"""Module system and the standard layers.

A Module owns Parameters and child Modules as plain attributes (lists of
Modules work too). Traversal follows attribute insertion order, which is
what makes parameter iteration, initialization, and checkpoint naming
deterministic for a fixed architecture.

Every layer implements flops(in_shape, trace) -> (flops, out_shape) for the
analytic cost model: in_shape is a single sample (C, H, W), multiply-
accumulates count as 2 FLOPs, batch norm as 2 per element, activations as
1 per element, pooling/add/scale as 1 per input element involved. When a
trace list is passed, each primitive appends a record that an independent
checker can re-price.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor


def kaiming_uniform(rng, shape, fan_in, dtype):
    if fan_in <= 0:
        raise ConfigError(f"fan_in must be positive, got {fan_in}")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def note(trace, kind, flops, **fields):
    if trace is not None:
        trace.append({"kind": kind, "flops": int(flops), **fields})
    return int(flops)


def conv_flops(trace, cout, cig, kh, kw, ho, wo, bias, groups=1):
    f = 2 * cout * ho * wo * cig * kh * kw + (cout * ho * wo if bias else 0)
    return note(trace, "conv", f, cout=cout, cig=cig, kh=kh, kw=kw,
                ho=ho, wo=wo, bias=bias, groups=groups)


class Module:
    def __init__(self):
        self.training = True

    # -- traversal -----------------------------------------------------
    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def flops(self, in_shape, trace=None):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, *, rng,
                 stride=1, padding=0, groups=1, bias=True, dtype=np.float32):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ConfigError(f"groups={groups} must divide channels "
                              f"{in_channels}->{out_channels}")
        k = int(kernel_size)
        cig = in_channels // groups
        self.stride, self.padding, self.groups = stride, padding, groups
        self.weight = Parameter(
            kaiming_uniform(rng, (out_channels, cig, k, k), cig * k * k, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)

    def flops(self, in_shape, trace=None):
        c, h, w = in_shape
        cout, cig, kh, kw = self.weight.shape
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        f = conv_flops(trace, cout, cig, kh, kw, ho, wo,
                       self.bias is not None, self.groups)
        return f, (cout, ho, wo)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm2d(x, self.gamma, self.beta,
                              self.running_mean, self.running_var,
                              training=self.training, momentum=self.momentum,
                              eps=self.eps)

    def flops(self, in_shape, trace=None):
        c, h, w = in_shape
        return note(trace, "bn", 2 * c * h * w, c=c, h=h, w=w), in_shape


class Linear(Module):
    def __init__(self, in_features, out_features, *, rng, bias=True,
                 dtype=np.float32):
        super().__init__()
        self.weight = Parameter(
            kaiming_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2:
            raise ShapeError(f"linear wants (N, C), got {x.shape}")
        y = T.matmul(x, T.transpose2d(self.weight))
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y

    def flops(self, in_shape, trace=None):
        (cin,) = in_shape
        cout = self.weight.shape[0]
        f = 2 * cin * cout + (cout if self.bias is not None else 0)
        return note(trace, "linear", f, cin=cin, cout=cout,
                    bias=self.bias is not None), (cout,)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)

    def flops(self, in_shape, trace=None):
        n = int(np.prod(in_shape))
        return note(trace, "act", n, elems=n, op="relu"), in_shape


class Sequential(Module):
    def __init__(self, *mods):
        super().__init__()
        self.mods = list(mods)

    def forward(self, x: Tensor) -> Tensor:
        for m in self.mods:
            x = m(x)
        return x

    def flops(self, in_shape, trace=None):
        total = 0
        for m in self.mods:
            f, in_shape = m.flops(in_shape, trace)
            total += f
        return total, in_shape
