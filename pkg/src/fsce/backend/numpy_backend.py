"""Pure-NumPy grouped 2-D convolution.

Strategy: loop over the kh*kw kernel offsets; each offset contributes one
strided slice of the (padded) input contracted against one (groups, Cout/g,
Cin/g) weight slab. No im2col buffer is ever materialized, peak memory is
one padded copy of the input, and every accumulation happens in a fixed
offset order so results are bitwise reproducible.

Shapes follow the engine convention: x (N, Cin, H, W), w (Cout, Cin/g, kh, kw),
out (N, Cout, Ho, Wo). Validation happens in the caller; these kernels assume
coherent arguments.
"""

import numpy as np

name = "numpy"


def _out_dim(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, w, stride=1, padding=0, groups=1):
    N, Cin, H, W = x.shape
    Cout, Cig, kh, kw = w.shape
    Cog = Cout // groups
    Ho, Wo = _out_dim(H, kh, stride, padding), _out_dim(W, kw, stride, padding)
    xp = _pad(x, padding).reshape(N, groups, Cig, H + 2 * padding, W + 2 * padding)
    wg = w.reshape(groups, Cog, Cig, kh, kw)
    out = np.zeros((N, groups, Cog, Ho, Wo), dtype=x.dtype)
    depthwise = Cig == 1 and Cog == 1
    for ki in range(kh):
        for kj in range(kw):
            xs = xp[:, :, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride]
            if depthwise:
                out += wg[None, :, :, 0, ki, kj, None, None] * xs
            else:
                out += np.einsum("goc,ngchw->ngohw", wg[:, :, :, ki, kj], xs,
                                 optimize=True)
    return out.reshape(N, Cout, Ho, Wo)


def conv2d_backward_data(gout, w, x_shape, stride=1, padding=0, groups=1):
    N, Cin, H, W = x_shape
    Cout, Cig, kh, kw = w.shape
    Cog = Cout // groups
    Ho, Wo = gout.shape[2], gout.shape[3]
    gg = gout.reshape(N, groups, Cog, Ho, Wo)
    wg = w.reshape(groups, Cog, Cig, kh, kw)
    gxp = np.zeros((N, groups, Cig, H + 2 * padding, W + 2 * padding), dtype=gout.dtype)
    depthwise = Cig == 1 and Cog == 1
    for ki in range(kh):
        for kj in range(kw):
            sl = gxp[:, :, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride]
            if depthwise:
                sl += wg[None, :, :, 0, ki, kj, None, None] * gg
            else:
                sl += np.einsum("goc,ngohw->ngchw", wg[:, :, :, ki, kj], gg,
                                optimize=True)
    gxp = gxp.reshape(N, Cin, H + 2 * padding, W + 2 * padding)
    if padding:
        gxp = gxp[:, :, padding:padding + H, padding:padding + W]
    return np.ascontiguousarray(gxp)


def conv2d_backward_weight(x, gout, w_shape, stride=1, padding=0, groups=1):
    N, Cin, H, W = x.shape
    Cout, Cig, kh, kw = w_shape
    Cog = Cout // groups
    Ho, Wo = gout.shape[2], gout.shape[3]
    xp = _pad(x, padding).reshape(N, groups, Cig, H + 2 * padding, W + 2 * padding)
    gg = gout.reshape(N, groups, Cog, Ho, Wo)
    gw = np.zeros((groups, Cog, Cig, kh, kw), dtype=gout.dtype)
    depthwise = Cig == 1 and Cog == 1
    for ki in range(kh):
        for kj in range(kw):
            xs = xp[:, :, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride]
            if depthwise:
                gw[:, 0, 0, ki, kj] += np.einsum("nghw,nghw->g", gg[:, :, 0], xs[:, :, 0])
            else:
                gw[:, :, :, ki, kj] += np.einsum("ngohw,ngchw->goc", gg, xs,
                                                 optimize=True)
    return gw.reshape(Cout, Cig, kh, kw)
