"""Finite-difference verification of the differentiable building blocks.

Every case builds a float64 scene (leaf tensors plus a scalar loss closure),
runs one taped backward pass, then re-prices each leaf element with central
differences. The reported error is

    max |analytic - numeric| / max(1e-6, max |numeric|)

over all leaves of the case. Losses are random-weight contractions of the
block output so sign errors cannot cancel. Inputs are drawn away from the
relu kink and from pooling ties.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .attention import Cbam
from .dsaf import DsafBlock
from .errors import ConfigError
from .tensor import Tape, Tensor
from .wavelet import WaveletConv2d, dwt2, iwt2

DEFAULT_STEP = 1e-5

_CASES: dict[str, tuple] = {}


def _case(name: str, threshold: float = 1e-6):
    def register(builder):
        _CASES[name] = (builder, threshold)
        return builder
    return register


def case_names() -> list[str]:
    return list(_CASES)


def _rng(name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:4], "little"))


def _leafy(rng, shape) -> Tensor:
    """Values in +-[0.2, 1.0]: no relu kinks, no exact pool ties."""
    mag = rng.uniform(0.2, 1.0, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return Tensor(mag * sign)


def _contract(rng, out: Tensor) -> Tensor:
    w = Tensor(rng.standard_normal(out.shape), constant=True)
    return T.tsum(T.mul(out, w))


def finite_difference_check(loss_fn, leaves, step: float = DEFAULT_STEP):
    """Return (rel_err, max_abs_diff). loss_fn must be a pure function of
    the leaves' data."""
    for t in leaves:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in leaves]
    max_abs = 0.0
    num_scale = 0.0
    for t, ana in zip(leaves, analytic):
        flat = t.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn().item()
            flat[i] = orig - step
            lm = loss_fn().item()
            flat[i] = orig
            num = (lp - lm) / (2.0 * step)
            max_abs = max(max_abs, abs(aflat[i] - num))
            num_scale = max(num_scale, abs(num))
    return max_abs / max(1e-6, num_scale), max_abs


def run_case(name: str, step: float = DEFAULT_STEP) -> dict:
    if name not in _CASES:
        raise ConfigError(f"unknown gradient case {name!r}, "
                          f"choose from {', '.join(_CASES)}")
    builder, threshold = _CASES[name]
    loss_fn, leaves = builder()
    rel, max_abs = finite_difference_check(loss_fn, leaves, step)
    return {"name": name, "rel_err": rel, "max_abs": max_abs,
            "threshold": threshold, "ok": rel <= threshold,
            "n_elements": int(sum(t.data.size for t in leaves))}


def run_all(names=None, step: float = DEFAULT_STEP) -> list[dict]:
    return [run_case(n, step) for n in (names or case_names())]


# ------------------------------------------------------------- primitive cases

@_case("matmul")
def _build_matmul():
    rng = _rng("matmul")
    a, b = _leafy(rng, (3, 4)), _leafy(rng, (4, 5))
    return lambda: _contract(rng, T.matmul(a, b)), [a, b]


@_case("mlp2_shared")
def _build_mlp2():
    rng = _rng("mlp2_shared")
    v, w1, w2 = _leafy(rng, (3, 4)), _leafy(rng, (5, 4)), _leafy(rng, (4, 5))
    # two call sites with the same weights: accumulation must be exact
    fn = lambda: _contract(rng, T.add(T.mlp2(v, w1, w2), T.mlp2(v, w1, w2)))
    return fn, [v, w1, w2]


@_case("relu")
def _build_relu():
    rng = _rng("relu")
    x = _leafy(rng, (3, 4))
    return lambda: _contract(rng, T.relu(x)), [x]


@_case("sigmoid")
def _build_sigmoid():
    rng = _rng("sigmoid")
    x = _leafy(rng, (3, 5))
    return lambda: _contract(rng, T.sigmoid(x)), [x]


@_case("softmax")
def _build_softmax():
    rng = _rng("softmax")
    x = _leafy(rng, (3, 5))
    return lambda: _contract(rng, T.softmax(x, axis=1)), [x]


@_case("log_softmax")
def _build_log_softmax():
    rng = _rng("log_softmax")
    x = _leafy(rng, (3, 5))
    return lambda: _contract(rng, T.log_softmax(x, axis=1)), [x]


@_case("sum_mean")
def _build_sum_mean():
    rng = _rng("sum_mean")
    x = _leafy(rng, (2, 3, 4))
    fn = lambda: _contract(rng, T.add(T.tsum(x, (0, 2), keepdims=True),
                                      T.tmean(x, (0, 2), keepdims=True)))
    return fn, [x]


@_case("max_reduce")
def _build_max_reduce():
    rng = _rng("max_reduce")
    x = _leafy(rng, (2, 3, 4))
    return lambda: _contract(rng, T.max_reduce(x, (2,))), [x]


@_case("reshape_concat_narrow")
def _build_reshape():
    rng = _rng("reshape_concat_narrow")
    a, b = _leafy(rng, (2, 3, 4)), _leafy(rng, (2, 2, 4))
    def fn():
        c = T.concat([a, b], axis=1)
        n = T.narrow(c, 1, 1, 3)
        return _contract(rng, T.reshape(n, (2, 12)))
    return fn, [a, b]


# ----------------------------------------------------------------- conv cases

def _conv_case(name, xshape, wshape, bias=True, **kw):
    rng = _rng(name)
    x, w = _leafy(rng, xshape), _leafy(rng, wshape)
    leaves = [x, w]
    b = None
    if bias:
        b = _leafy(rng, (wshape[0],))
        leaves.append(b)
    fn = lambda: _contract(rng, T.conv2d(x, w, b, **kw))
    return fn, leaves


@_case("conv3x3_pad")
def _build_conv33():
    return _conv_case("conv3x3_pad", (2, 3, 6, 6), (4, 3, 3, 3), padding=1)


@_case("conv_stride2")
def _build_conv_s2():
    return _conv_case("conv_stride2", (1, 2, 7, 7), (3, 2, 3, 3),
                      stride=2, padding=1)


@_case("conv_groups2")
def _build_conv_g2():
    return _conv_case("conv_groups2", (1, 4, 5, 5), (6, 2, 3, 3),
                      padding=1, groups=2)


@_case("conv_depthwise")
def _build_conv_dw():
    return _conv_case("conv_depthwise", (2, 3, 5, 5), (3, 1, 3, 3),
                      padding=1, groups=3)


@_case("conv1x1")
def _build_conv11():
    return _conv_case("conv1x1", (1, 3, 4, 4), (5, 3, 1, 1), bias=False)


@_case("avg_pool")
def _build_avg_pool():
    rng = _rng("avg_pool")
    x = _leafy(rng, (1, 2, 7, 7))
    # window 3 on 7x7 exercises the dropped remainder
    return lambda: _contract(rng, T.avg_pool2d(x, 3)), [x]


@_case("max_pool")
def _build_max_pool():
    rng = _rng("max_pool")
    x = _leafy(rng, (1, 2, 6, 6))
    return lambda: _contract(rng, T.max_pool2d(x, 2)), [x]


@_case("adaptive_pool")
def _build_adaptive():
    rng = _rng("adaptive_pool")
    x = _leafy(rng, (1, 2, 7, 5))
    return lambda: _contract(rng, T.adaptive_avg_pool2d(x, (3, 3))), [x]


@_case("batchnorm_train")
def _build_bn_train():
    rng = _rng("batchnorm_train")
    x, gamma, beta = _leafy(rng, (3, 2, 4, 4)), _leafy(rng, (2,)), _leafy(rng, (2,))
    rm, rv = np.zeros(2), np.ones(2)
    fn = lambda: _contract(rng, T.batch_norm2d(x, gamma, beta, rm, rv,
                                               training=True))
    return fn, [x, gamma, beta]


@_case("batchnorm_eval")
def _build_bn_eval():
    rng = _rng("batchnorm_eval")
    x, gamma, beta = _leafy(rng, (3, 2, 4, 4)), _leafy(rng, (2,)), _leafy(rng, (2,))
    rm = rng.standard_normal(2)
    rv = rng.uniform(0.5, 2.0, 2)
    fn = lambda: _contract(rng, T.batch_norm2d(x, gamma, beta, rm, rv,
                                               training=False))
    return fn, [x, gamma, beta]


# --------------------------------------------------------------- module cases

@_case("dwt_iwt")
def _build_dwt():
    rng = _rng("dwt_iwt")
    x = _leafy(rng, (1, 3, 4, 4))
    y = _leafy(rng, (1, 8, 2, 2))
    return lambda: _contract(rng, T.concat(
        [T.reshape(dwt2(x), (1, -1)), T.reshape(iwt2(y), (1, -1))], axis=1)), [x, y]


@_case("wavelet_conv", threshold=1e-5)
def _build_wtconv():
    rng = _rng("wavelet_conv")
    mod = WaveletConv2d(3, kernel_size=3, dtype=np.float64)
    # move off the identity init so every weight sees curvature
    g = np.random.default_rng(7)
    for p in mod.parameters():
        p.data += 0.05 * g.standard_normal(p.shape)
    x = _leafy(rng, (1, 3, 6, 6))
    return lambda: _contract(rng, mod(x)), [x, *mod.parameters()]


@_case("cbam", threshold=1e-5)
def _build_cbam():
    rng = _rng("cbam")
    mod = Cbam(4, reduction=2, rng=np.random.default_rng(11), dtype=np.float64)
    x = _leafy(rng, (2, 4, 6, 6))
    return lambda: _contract(rng, mod(x)), [x, *mod.parameters()]


@_case("cbam_legacy", threshold=1e-5)
def _build_cbam_legacy():
    rng = _rng("cbam_legacy")
    mod = Cbam(4, reduction=2, legacy_order=True,
               rng=np.random.default_rng(13), dtype=np.float64)
    x = _leafy(rng, (2, 4, 6, 6))
    return lambda: _contract(rng, mod(x)), [x, *mod.parameters()]


@_case("dsaf_block", threshold=1e-4)
def _build_dsaf():
    rng = _rng("dsaf_block")
    mod = DsafBlock(4, rng=np.random.default_rng(17), dtype=np.float64)
    mod.train()
    x = _leafy(rng, (1, 4, 8, 8))
    return lambda: _contract(rng, mod(x)), [x, *mod.parameters()]
