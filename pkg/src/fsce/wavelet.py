"""Single-level 2-D Haar transform and the wavelet convolution layer.

The filter bank is orthonormal: the four 2x2 filters have entries +-0.5,
every analysis matrix row has unit norm, and the synthesis transform is
exactly the transpose. Two consequences the rest of the code leans on:

- iwt2(dwt2(x)) reconstructs x up to float roundoff and energy is
  preserved (Parseval), which the tests check to 1e-5 in float32;
- the adjoint of analysis IS synthesis, so the backward pass of dwt2
  runs the iwt2 kernel on the gradient and vice versa. No separate
  gradient code exists to get wrong.

Subband order is (LL, LH, HL, HH), interleaved per input channel:
channel c maps to output channels 4c..4c+3. LL averages a 2x2 block,
LH responds to variation along width, HL along height, HH diagonally.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import BatchNorm2d, Conv2d, Module, conv_flops, note
from .tensor import Parameter, Tensor, _acc, _emit


class HaarFilterBank:
    """The fixed orthonormal Haar pair and its four 2-D product filters."""

    def __init__(self):
        s = 1.0 / np.sqrt(2.0)
        self.lo = np.array([s, s])
        self.hi = np.array([s, -s])

    def filters(self) -> np.ndarray:
        """(4, 2, 2) array ordered LL, LH, HL, HH; entries are +-0.5."""
        pairs = [(self.lo, self.lo), (self.lo, self.hi),
                 (self.hi, self.lo), (self.hi, self.hi)]
        return np.stack([np.outer(a, b) for a, b in pairs])

    def matrix(self) -> np.ndarray:
        """(4, 4) analysis matrix over a flattened 2x2 block; orthonormal."""
        return self.filters().reshape(4, 4)


_BANK = HaarFilterBank()
_M = _BANK.matrix()


def _analyze(arr: np.ndarray) -> np.ndarray:
    n, c, h, w = arr.shape
    m = _M.astype(arr.dtype)
    blocks = arr.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    coef = blocks.reshape(n, c, h // 2, w // 2, 4) @ m.T
    return np.ascontiguousarray(
        coef.transpose(0, 1, 4, 2, 3)).reshape(n, 4 * c, h // 2, w // 2)


def _synthesize(arr: np.ndarray) -> np.ndarray:
    n, c4, hh, wh = arr.shape
    c = c4 // 4
    m = _M.astype(arr.dtype)
    coef = arr.reshape(n, c, 4, hh, wh).transpose(0, 1, 3, 4, 2)
    blocks = (coef @ m).reshape(n, c, hh, wh, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(blocks).reshape(n, c, 2 * hh, 2 * wh)


def dwt2(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, 4C, H/2, W/2); H and W must be even."""
    if x.ndim != 4:
        raise ShapeError(f"dwt2 wants NCHW, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"dwt2 needs even spatial dims, got {x.shape[2:]}")

    def backward(g):
        _acc(x, _synthesize(g))

    return _emit((x,), _analyze(x.data), backward)


def iwt2(y: Tensor) -> Tensor:
    """(N, 4C, Hh, Wh) -> (N, C, 2Hh, 2Wh); channel count must divide by 4."""
    if y.ndim != 4:
        raise ShapeError(f"iwt2 wants NCHW, got {y.shape}")
    if y.shape[1] % 4:
        raise ShapeError(f"iwt2 needs 4k channels, got {y.shape[1]}")

    def backward(g):
        _acc(y, _analyze(g))

    return _emit((y,), _synthesize(y.data), backward)


class WaveletConv2d(Module):
    """Depthwise conv on the Haar subbands with per-subband gains, inverse
    transform, plus a depthwise base path on the raw input.

    Initialized as the exact identity: the subband conv starts as a delta,
    the gains at one, the base path at zero. Stride > 1 is realized as mean
    pooling of the combined output.
    """

    def __init__(self, channels: int, kernel_size: int = 3, stride: int = 1, *,
                 rng=None, dtype=np.float32):
        # rng accepted for signature symmetry with the other layers; the
        # identity init draws nothing
        super().__init__()
        if channels < 1:
            raise ConfigError(f"channels must be >= 1, got {channels}")
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ConfigError(f"kernel_size must be odd, got {kernel_size}")
        if stride < 1:
            raise ConfigError(f"stride must be >= 1, got {stride}")
        self.channels = channels
        self.kernel_size = kernel_size
        self.stride = stride
        k = kernel_size
        delta = np.zeros((4 * channels, 1, k, k), dtype=dtype)
        delta[:, 0, k // 2, k // 2] = 1
        self.sub_weight = Parameter(delta)
        self.gain = Parameter(np.ones((4 * channels, 1, 1), dtype=dtype))
        self.base_weight = Parameter(np.zeros((channels, 1, k, k), dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[1]}")
        k = self.kernel_size
        y = dwt2(x)
        y = T.conv2d(y, self.sub_weight, padding=k // 2, groups=4 * self.channels)
        y = T.mul(y, self.gain)
        back = iwt2(y)
        base = T.conv2d(x, self.base_weight, padding=k // 2, groups=self.channels)
        out = T.add(base, back)
        if self.stride > 1:
            out = T.avg_pool2d(out, self.stride)
        return out

    def flops(self, in_shape, trace=None):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ShapeError(f"wavelet conv needs even dims, got {in_shape}")
        k = self.kernel_size
        hh, wh = h // 2, w // 2
        total = note(trace, "dwt", 8 * c * h * w, c=c, h=h, w=w)
        total += conv_flops(trace, 4 * c, 1, k, k, hh, wh, False, 4 * c)
        total += note(trace, "mul", 4 * c * hh * wh, elems=4 * c * hh * wh)
        total += note(trace, "iwt", 8 * c * h * w, c=c, h=h, w=w)
        total += conv_flops(trace, c, 1, k, k, h, w, False, c)
        total += note(trace, "add", c * h * w, elems=c * h * w)
        out = (c, h, w)
        if self.stride > 1:
            total += note(trace, "pool", c * h * w, elems=c * h * w)
            out = (c, h // self.stride, w // self.stride)
        return total, out
