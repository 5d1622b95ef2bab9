"""Times both convolution backends on the shapes the models actually run.

Usage: python benchmarks/bench_backends.py [--batch 64] [--repeats 5]

Reports GFLOP/s per (shape, pass) for the numpy backend and, when the
extension built, the compiled backend, plus the speedup ratio. FLOPs use
the package convention (1 MAC = 2 FLOPs).
"""

import argparse
import time

import numpy as np

from fsce.backend import available_backends, numpy_backend

try:
    from fsce.backend import _kernels
except ImportError:
    _kernels = None

# (label, Cin, H, W, Cout, k, stride, padding, groups)
SHAPES = [
    ("stem 1->8 64x64", 1, 64, 64, 8, 3, 1, 1, 1),
    ("stage 8->8 /2", 8, 64, 64, 8, 3, 2, 1, 1),
    ("stage 16->32 /2", 16, 16, 16, 32, 3, 2, 1, 1),
    ("teacher 64->64 8x8", 64, 8, 8, 64, 3, 1, 1, 1),
    ("scale k9 4->4 32x32", 4, 32, 32, 4, 9, 1, 4, 1),
    ("depthwise 16 32x32", 16, 32, 32, 16, 3, 1, 1, 16),
    ("pointwise 16->4", 16, 32, 32, 4, 1, 1, 0, 1),
]


def conv_flops(n, cin, h, w, cout, k, stride, padding, groups):
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    return 2 * n * cout * ho * wo * (cin // groups) * k * k


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_backend(mod, n, spec, repeats):
    label, cin, h, w, cout, k, stride, padding, groups = spec
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, cin, h, w)).astype(np.float32)
    wgt = rng.standard_normal((cout, cin // groups, k, k)).astype(np.float32)
    out = mod.conv2d_forward(x, wgt, stride, padding, groups)
    gout = np.ascontiguousarray(out)
    flops = conv_flops(n, cin, h, w, cout, k, stride, padding, groups)
    res = {}
    res["fwd"] = flops / best_of(
        lambda: mod.conv2d_forward(x, wgt, stride, padding, groups), repeats)
    res["bwd_data"] = flops / best_of(
        lambda: mod.conv2d_backward_data(gout, wgt, x.shape, stride, padding,
                                         groups), repeats)
    res["bwd_weight"] = flops / best_of(
        lambda: mod.conv2d_backward_weight(x, gout, wgt.shape, stride, padding,
                                           groups), repeats)
    return res


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    print(f"backends available: {', '.join(available_backends())}")
    if _kernels is None:
        print("compiled extension not built; timing numpy only")

    header = f"{'shape':<22}{'pass':<12}{'numpy GF/s':>12}"
    if _kernels is not None:
        header += f"{'compiled GF/s':>15}{'speedup':>9}"
    print(header)
    for spec in SHAPES:
        np_res = bench_backend(numpy_backend, args.batch, spec, args.repeats)
        cy_res = bench_backend(_kernels, args.batch, spec, args.repeats) \
            if _kernels is not None else None
        for pass_name in ("fwd", "bwd_data", "bwd_weight"):
            line = f"{spec[0]:<22}{pass_name:<12}{np_res[pass_name] / 1e9:>12.2f}"
            if cy_res is not None:
                ratio = cy_res[pass_name] / np_res[pass_name]
                line += f"{cy_res[pass_name] / 1e9:>15.2f}{ratio:>9.2f}"
            print(line)


if __name__ == "__main__":
    main()
