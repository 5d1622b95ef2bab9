"""Dual-branch feature enhancement block.

The input is split down the channel dimension. The first half goes through
a multi-scale spatial branch: parallel odd-kernel convolutions at "same"
padding, an adaptive average pool aligning every scale to the reference
spatial size (the identity when shapes already agree, kept for safety),
channel concatenation, a depthwise 3x3 + pointwise 1x1 fusion, batch norm,
ReLU, and an attention gate. The second half goes through the wavelet
branch: WaveletConv2d, batch norm, ReLU, and its own attention gate. The
two halves are concatenated back, so output channels == input channels.

branches="spatial" or "frequency" keeps only one processed half and passes
the other half through untouched; that raw passthrough is what the ablation
variants and the reduction-to-reference test rely on.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import Cbam
from .errors import ConfigError, DegenerateStatsError, ShapeError
from .nn import BatchNorm2d, Conv2d, Module, note
from .tensor import Tensor, no_grad
from .wavelet import WaveletConv2d

BRANCH_CHOICES = ("both", "spatial", "frequency")


class DsafBlock(Module):
    def __init__(self, channels: int, kernel_sizes=(3, 5, 7, 9),
                 cbam_reduction: int = 8, branches: str = "both",
                 legacy_cbam: bool = False, wt_kernel: int = 3, *,
                 rng, dtype=np.float32):
        super().__init__()
        if channels < 2 or channels % 2:
            raise ConfigError(f"channel count must be even and >= 2, got {channels}")
        if branches not in BRANCH_CHOICES:
            raise ConfigError(f"branches must be one of {BRANCH_CHOICES}, got {branches!r}")
        kernel_sizes = tuple(int(k) for k in kernel_sizes)
        if not kernel_sizes:
            raise ConfigError("kernel_sizes must be non-empty")
        for k in kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and positive, got {k}")
        self.channels = channels
        self.kernel_sizes = kernel_sizes
        self.branches = branches
        half = channels // 2
        self.half = half
        if branches in ("both", "spatial"):
            self.scale_convs = [
                Conv2d(half, half, k, padding=(k - 1) // 2, bias=False,
                       rng=rng, dtype=dtype)
                for k in kernel_sizes
            ]
            cat = half * len(kernel_sizes)
            self.fuse_dw = Conv2d(cat, cat, 3, padding=1, groups=cat, bias=False,
                                  rng=rng, dtype=dtype)
            self.fuse_pw = Conv2d(cat, half, 1, bias=False, rng=rng, dtype=dtype)
            self.bn_s = BatchNorm2d(half, dtype=dtype)
            self.cbam_s = Cbam(half, cbam_reduction, legacy_order=legacy_cbam,
                               rng=rng, dtype=dtype)
        if branches in ("both", "frequency"):
            self.wt = WaveletConv2d(half, wt_kernel, rng=rng, dtype=dtype)
            self.bn_f = BatchNorm2d(half, dtype=dtype)
            self.cbam_f = Cbam(half, cbam_reduction, legacy_order=legacy_cbam,
                               rng=rng, dtype=dtype)

    def _spatial(self, xs: Tensor) -> Tensor:
        outs = [conv(xs) for conv in self.scale_convs]
        ref = outs[0].shape[2:]
        outs = [T.adaptive_avg_pool2d(o, ref) for o in outs]
        y = T.concat(outs, 1)
        y = self.fuse_dw(y)
        y = self.fuse_pw(y)
        y = T.relu(self.bn_s(y))
        return self.cbam_s(y)

    def _frequency(self, xf: Tensor) -> Tensor:
        y = self.wt(xf)
        y = T.relu(self.bn_f(y))
        return self.cbam_f(y)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (N, {self.channels}, H, W), got {x.shape}")
        xs = T.narrow(x, 1, 0, self.half)
        xf = T.narrow(x, 1, self.half, self.half)
        fs = self._spatial(xs) if self.branches in ("both", "spatial") else xs
        ff = self._frequency(xf) if self.branches in ("both", "frequency") else xf
        return T.concat([fs, ff], 1)

    def flops(self, in_shape, trace=None):
        c, h, w = in_shape
        half = self.half
        total = 0
        if self.branches in ("both", "spatial"):
            shape = None
            for conv in self.scale_convs:
                f, shape = conv.flops((half, h, w), trace)
                total += f
            # same-padding scales already align; the adaptive pool reads its input
            for _ in self.scale_convs:
                total += note(trace, "pool", half * h * w, elems=half * h * w,
                              op="adaptive")
            cat = half * len(self.scale_convs)
            f, shape = self.fuse_dw.flops((cat, h, w), trace)
            total += f
            f, shape = self.fuse_pw.flops(shape, trace)
            total += f
            f, shape = self.bn_s.flops(shape, trace)
            total += f
            total += note(trace, "act", half * h * w, elems=half * h * w, op="relu")
            f, _ = self.cbam_s.flops(shape, trace)
            total += f
        if self.branches in ("both", "frequency"):
            f, shape = self.wt.flops((half, h, w), trace)
            total += f
            f, shape = self.bn_f.flops(shape, trace)
            total += f
            total += note(trace, "act", half * h * w, elems=half * h * w, op="relu")
            f, _ = self.cbam_f.flops(shape, trace)
            total += f
        return total, in_shape


def background_smoothness(block: Module, noisy: np.ndarray,
                          clean: np.ndarray) -> float:
    """Diagnostic: variance of the block output over the background region
    divided by the variance of the input there. Background is where the
    clean reference sits below the midpoint of its own range, per sample.

    Values below 1 mean the block smoothed the background. Raises
    DegenerateStatsError when the background is empty or flat.
    """
    noisy = np.asarray(noisy, dtype=np.float32)
    clean = np.asarray(clean, dtype=np.float32)
    if noisy.shape != clean.shape or noisy.ndim != 4:
        raise ShapeError(f"need matching NCHW inputs, got {noisy.shape} vs {clean.shape}")
    lo = clean.reshape(clean.shape[0], -1).min(axis=1)
    hi = clean.reshape(clean.shape[0], -1).max(axis=1)
    thr = ((lo + hi) / 2.0).reshape(-1, 1, 1, 1)
    mask = clean < thr
    if not mask.any():
        raise DegenerateStatsError("background mask is empty")
    was_training = block.training
    block.eval()
    try:
        with no_grad():
            out = block(Tensor(noisy, constant=True)).data
    finally:
        block.train(was_training)
    var_in = float(noisy[mask].var())
    var_out = float(out[mask].var())
    if var_in == 0.0:
        raise DegenerateStatsError("background of the input has zero variance")
    return var_out / var_in
