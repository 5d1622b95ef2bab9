"""Convolutional block attention: channel gate then spatial gate.

Two orderings of the descriptor arithmetic are provided. The default sums
the average- and max-pooled descriptors FIRST and sends the sum through the
shared two-layer MLP (and, on the spatial side, sums the two pooled maps
into a single-channel input for the 7x7 conv). legacy_order=True instead
applies the MLP to each descriptor separately and sums the outputs, and
concatenates the two spatial maps into a 2-channel conv input, which is the
ordering most published attention blocks use. Both share every parameter
shape except the spatial conv input width.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Module, Parameter, kaiming_uniform, note
from .tensor import Tensor


class Cbam(Module):
    def __init__(self, channels: int, reduction: int = 8, spatial_kernel: int = 7,
                 legacy_order: bool = False, *, rng, dtype=np.float32):
        super().__init__()
        if channels < 1 or reduction < 1:
            raise ConfigError(f"bad channels/reduction {channels}/{reduction}")
        if spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial kernel must be odd, got {spatial_kernel}")
        self.channels = channels
        self.legacy_order = legacy_order
        self.spatial_kernel = spatial_kernel
        hidden = max(channels // reduction, 4)
        self.hidden = hidden
        self.w1 = Parameter(kaiming_uniform(rng, (hidden, channels), channels, dtype))
        self.w2 = Parameter(kaiming_uniform(rng, (channels, hidden), hidden, dtype))
        k = spatial_kernel
        cin = 2 if legacy_order else 1
        self.spatial_weight = Parameter(
            kaiming_uniform(rng, (1, cin, k, k), cin * k * k, dtype))

    def channel_gate(self, x: Tensor) -> Tensor:
        n, c = x.shape[0], x.shape[1]
        avg = T.reshape(T.tmean(x, (2, 3), keepdims=True), (n, c))
        mx = T.reshape(T.max_reduce(x, (2, 3), keepdims=True), (n, c))
        if self.legacy_order:
            a = T.add(T.mlp2(avg, self.w1, self.w2), T.mlp2(mx, self.w1, self.w2))
        else:
            a = T.mlp2(T.add(avg, mx), self.w1, self.w2)
        return T.reshape(T.sigmoid(a), (n, c, 1, 1))

    def spatial_gate(self, x: Tensor) -> Tensor:
        avg = T.tmean(x, (1,), keepdims=True)
        mx = T.max_reduce(x, (1,), keepdims=True)
        desc = T.concat([avg, mx], 1) if self.legacy_order else T.add(avg, mx)
        conv = T.conv2d(desc, self.spatial_weight, padding=self.spatial_kernel // 2)
        return T.sigmoid(conv)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (N, {self.channels}, H, W), got {x.shape}")
        x = T.mul(x, self.channel_gate(x))
        return T.mul(x, self.spatial_gate(x))

    def flops(self, in_shape, trace=None):
        c, h, w = in_shape
        hid = self.hidden
        total = note(trace, "pool", c * h * w, elems=c * h * w, op="chan-avg")
        total += note(trace, "pool", c * h * w, elems=c * h * w, op="chan-max")
        mlp = 2 * c * hid + 2 * hid * c + hid  # two matmuls plus hidden relu
        if self.legacy_order:
            total += note(trace, "mlp", 2 * mlp + c, cin=c, hidden=hid, calls=2)
        else:
            total += note(trace, "add", c, elems=c)
            total += note(trace, "mlp", mlp, cin=c, hidden=hid, calls=1)
        total += note(trace, "act", c, elems=c, op="sigmoid")
        total += note(trace, "mul", c * h * w, elems=c * h * w)
        total += note(trace, "pool", c * h * w, elems=c * h * w, op="spat-avg")
        total += note(trace, "pool", c * h * w, elems=c * h * w, op="spat-max")
        k = self.spatial_kernel
        if self.legacy_order:
            total += note(trace, "conv", 2 * h * w * 2 * k * k, cout=1, cig=2,
                          kh=k, kw=k, ho=h, wo=w, bias=False, groups=1)
        else:
            total += note(trace, "add", h * w, elems=h * w)
            total += note(trace, "conv", 2 * h * w * k * k, cout=1, cig=1,
                          kh=k, kw=k, ho=h, wo=w, bias=False, groups=1)
        total += note(trace, "act", h * w, elems=h * w, op="sigmoid")
        total += note(trace, "mul", c * h * w, elems=c * h * w)
        return total, in_shape
