"""The two convolution backends must agree on every shape class either one
special-cases, and each must be bitwise reproducible call to call. Agreement
is to floating-point reorder tolerance; determinism is exact."""

import subprocess
import sys

import numpy as np
import pytest

from fsce import backend
from fsce.backend import numpy_backend

# (xshape, wshape, stride, padding, groups) covering the dispatch corners:
# small and large channel products, long and short rows, grouped and
# depthwise forms, a kernel wider than the unrolled sizes, padding right at
# the kernel-1 stencil limit, strides and even kernels that fall back to the
# blocked path, and a kernel larger than the input.
SHAPES = [
    ((1, 3, 8, 8), (4, 3, 3, 3), 1, 1, 1),
    ((2, 4, 9, 7), (6, 2, 3, 3), 2, 1, 2),
    ((1, 2, 12, 12), (2, 1, 5, 5), 1, 2, 2),
    ((2, 3, 16, 16), (5, 3, 1, 1), 1, 0, 1),
    ((1, 8, 10, 10), (8, 1, 3, 3), 1, 1, 8),
    ((1, 2, 13, 11), (3, 2, 11, 11), 1, 5, 1),
    ((2, 2, 7, 9), (4, 2, 4, 4), 3, 2, 1),
    ((1, 16, 32, 32), (16, 16, 3, 3), 1, 1, 1),
    ((1, 3, 6, 6), (2, 3, 3, 3), 1, 2, 1),
    ((1, 2, 24, 24), (2, 2, 9, 9), 1, 4, 1),
    ((1, 1, 4, 4), (1, 1, 7, 7), 1, 3, 1),
]

COMPILED = "compiled" in backend.available_backends()
needs_compiled = pytest.mark.skipif(not COMPILED,
                                    reason="compiled kernels not built")


def _case(shape_spec, dtype, seed=0):
    xshape, wshape, stride, padding, groups = shape_spec
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(xshape).astype(dtype)
    w = rng.standard_normal(wshape).astype(dtype)
    n, _, h, wd = xshape
    cout, _, kh, kw = wshape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    gout = rng.standard_normal((n, cout, ho, wo)).astype(dtype)
    return x, w, gout, stride, padding, groups


def _rel(a, b):
    scale = max(np.abs(b).max(), 1e-6)
    return np.abs(a - b).max() / scale


@needs_compiled
@pytest.mark.parametrize("spec", SHAPES)
@pytest.mark.parametrize("dtype,tol", [(np.float32, 2e-5), (np.float64, 1e-12)])
def test_backends_agree(spec, dtype, tol):
    from fsce.backend import _kernels

    x, w, gout, stride, padding, groups = _case(spec, dtype)
    for fast, slow, args in [
        (_kernels.conv2d_forward, numpy_backend.conv2d_forward,
         (x, w, stride, padding, groups)),
        (_kernels.conv2d_backward_data, numpy_backend.conv2d_backward_data,
         (gout, w, x.shape, stride, padding, groups)),
        (_kernels.conv2d_backward_weight, numpy_backend.conv2d_backward_weight,
         (x, gout, w.shape, stride, padding, groups)),
    ]:
        a, b = fast(*args), slow(*args)
        assert a.shape == b.shape and a.dtype == b.dtype
        assert _rel(a, b) < tol


@pytest.mark.parametrize("spec", SHAPES[:4])
def test_active_backend_is_deterministic(spec):
    x, w, gout, stride, padding, groups = _case(spec, np.float32, seed=1)
    first = backend.conv2d_forward(x, w, stride, padding, groups)
    again = backend.conv2d_forward(x, w, stride, padding, groups)
    assert np.array_equal(first, again)
    gw1 = backend.conv2d_backward_weight(x, gout, w.shape, stride, padding, groups)
    gw2 = backend.conv2d_backward_weight(x, gout, w.shape, stride, padding, groups)
    assert np.array_equal(gw1, gw2)
    gx1 = backend.conv2d_backward_data(gout, w, x.shape, stride, padding, groups)
    gx2 = backend.conv2d_backward_data(gout, w, x.shape, stride, padding, groups)
    assert np.array_equal(gx1, gx2)


def test_non_contiguous_inputs_accepted():
    x, w, _, stride, padding, groups = _case(SHAPES[0], np.float32, seed=2)
    xt = np.asfortranarray(x)
    out = backend.conv2d_forward(xt, w, stride, padding, groups)
    ref = backend.conv2d_forward(x, w, stride, padding, groups)
    assert np.array_equal(out, ref)


def _probe(env_value):
    code = "import fsce.backend as b; print(b.name)"
    return subprocess.run([sys.executable, "-c", code], capture_output=True,
                          text=True, env={"FSCE_BACKEND": env_value,
                                          "PATH": "/usr/bin:/bin"})


def test_backend_env_forces_numpy():
    r = _probe("numpy")
    assert r.returncode == 0 and r.stdout.strip() == "numpy"


def test_backend_env_rejects_unknown_value():
    r = _probe("cuda")
    assert r.returncode != 0
    assert "FSCE_BACKEND" in r.stderr
