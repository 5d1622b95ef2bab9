# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled grouped 2-D convolution.

Two execution paths:

* batched im2col + BLAS GEMM: the patch matrix is laid out (K, N*P) so each
  group needs exactly one GEMM for the whole batch; per-sample GEMMs at
  these channel counts are too thin to keep BLAS busy.
* direct stencil loops for stride-1 shapes with few channels per group
  (depthwise convs, the wide-kernel scale branches, the single-map
  attention conv): there im2col inflates memory traffic kh*kw-fold while
  the GEMM has too few rows to pay it back. The input is zero-padded once
  per call and every output row is produced by one fused multi-tap
  correlation pass, specialized per kernel width so the column loop
  vectorizes.

Everything here runs single-threaded and accumulates in a fixed order, so
repeated calls on identical inputs are bitwise identical.
"""

import numpy as np

from scipy.linalg.cython_blas cimport sgemm, dgemm

ctypedef fused real:
    float
    double


cdef inline void _gemm(bint ta, bint tb, int m, int n, int k,
                       real alpha, real* a, int lda, real* b, int ldb,
                       real beta, real* c, int ldc) noexcept nogil:
    # Row-major C(m,n) = alpha * op(A)(m,k) @ op(B)(k,n) + beta * C.
    # BLAS is column-major: swap operands and dimensions. lda/ldb are the
    # stored row lengths of A and B, ldc must equal n.
    cdef char cta = b'T' if ta else b'N'
    cdef char ctb = b'T' if tb else b'N'
    if real is float:
        sgemm(&ctb, &cta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)
    else:
        dgemm(&ctb, &cta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef inline int _wo_lo(int kj, int p, int s) noexcept nogil:
    cdef int lo = p - kj
    if lo <= 0:
        return 0
    return (lo + s - 1) / s


cdef inline int _wo_hi(int kj, int p, int s, int W, int Wo) noexcept nogil:
    # last wo with wo*s + kj - p <= W-1, clipped to Wo-1; -1 when empty
    cdef int hi = W - 1 + p - kj
    if hi < 0:
        return -1
    hi = hi / s
    if hi > Wo - 1:
        hi = Wo - 1
    return hi


cdef void _im2col(real* x, int Cig, int H, int W, int kh, int kw,
                  int s, int p, int Ho, int Wo, real* col, int ld) noexcept nogil:
    # writes the (K, P) patch slab for one sample; rows are ld apart so the
    # slabs of a whole batch can sit side by side in one (K, N*P) matrix
    cdef int ci, ki, kj, ho, wo, ih, wo0, wo1, base
    cdef real* dst
    cdef real* row
    for ci in range(Cig):
        for ki in range(kh):
            for kj in range(kw):
                dst = col + (((ci * kh) + ki) * kw + kj) * ld
                wo0 = _wo_lo(kj, p, s)
                wo1 = _wo_hi(kj, p, s, W, Wo)
                for ho in range(Ho):
                    ih = ho * s + ki - p
                    base = ho * Wo
                    if ih < 0 or ih >= H:
                        for wo in range(Wo):
                            dst[base + wo] = 0
                        continue
                    row = x + (ci * H + ih) * W
                    for wo in range(wo0):
                        dst[base + wo] = 0
                    if s == 1:
                        for wo in range(wo0, wo1 + 1):
                            dst[base + wo] = row[wo + kj - p]
                    else:
                        for wo in range(wo0, wo1 + 1):
                            dst[base + wo] = row[wo * s + kj - p]
                    for wo in range(wo1 + 1, Wo):
                        dst[base + wo] = 0


cdef void _col2im_add(real* col, int ld, int Cig, int H, int W, int kh, int kw,
                      int s, int p, int Ho, int Wo, real* gx) noexcept nogil:
    cdef int ci, ki, kj, ho, wo, ih, wo0, wo1
    cdef real* src
    cdef real* row
    for ci in range(Cig):
        for ki in range(kh):
            for kj in range(kw):
                src = col + (((ci * kh) + ki) * kw + kj) * ld
                wo0 = _wo_lo(kj, p, s)
                wo1 = _wo_hi(kj, p, s, W, Wo)
                for ho in range(Ho):
                    ih = ho * s + ki - p
                    if ih < 0 or ih >= H:
                        continue
                    row = gx + (ci * H + ih) * W
                    if s == 1:
                        for wo in range(wo0, wo1 + 1):
                            row[wo + kj - p] += src[ho * Wo + wo]
                    else:
                        for wo in range(wo0, wo1 + 1):
                            row[wo * s + kj - p] += src[ho * Wo + wo]


cdef void _gather(real* src, real* dst, int N, int Cout, int Cog, int g,
                  int P) noexcept nogil:
    # (N, Cout, P) group slice -> (Cog, N*P)
    cdef int n, co, i
    cdef real* a
    cdef real* b
    for n in range(N):
        for co in range(Cog):
            a = src + ((n * Cout) + g * Cog + co) * P
            b = dst + co * (N * P) + n * P
            for i in range(P):
                b[i] = a[i]


cdef void _scatter(real* src, real* dst, int N, int Cout, int Cog, int g,
                   int P) noexcept nogil:
    # (Cog, N*P) -> (N, Cout, P) group slice
    cdef int n, co, i
    cdef real* a
    cdef real* b
    for n in range(N):
        for co in range(Cog):
            a = src + co * (N * P) + n * P
            b = dst + ((n * Cout) + g * Cog + co) * P
            for i in range(P):
                b[i] = a[i]


# --------------------------------------------------- direct (few channels)

cdef void _pad_planes(real* x, real* xp, int NC, int H, int W,
                      int ph, int pw) noexcept nogil:
    # copy (NC, H, W) into the interior of the zeroed (NC, H+2ph, W+2pw)
    cdef int i, r, c
    cdef int Hp = H + 2 * ph, Wp = W + 2 * pw
    cdef real* src
    cdef real* dst
    for i in range(NC):
        for r in range(H):
            src = x + (i * H + r) * W
            dst = xp + (i * Hp + r + ph) * Wp + pw
            for c in range(W):
                dst[c] = src[c]


cdef inline void _corr3(real* d, real* s, real* w, int n) noexcept nogil:
    cdef int i
    for i in range(n):
        d[i] += w[0] * s[i] + w[1] * s[i + 1] + w[2] * s[i + 2]


cdef inline void _corr5(real* d, real* s, real* w, int n) noexcept nogil:
    cdef int i
    for i in range(n):
        d[i] += (w[0] * s[i] + w[1] * s[i + 1] + w[2] * s[i + 2]
                 + w[3] * s[i + 3] + w[4] * s[i + 4])


cdef inline void _corr7(real* d, real* s, real* w, int n) noexcept nogil:
    cdef int i
    for i in range(n):
        d[i] += (w[0] * s[i] + w[1] * s[i + 1] + w[2] * s[i + 2]
                 + w[3] * s[i + 3] + w[4] * s[i + 4] + w[5] * s[i + 5]
                 + w[6] * s[i + 6])


cdef inline void _corr9(real* d, real* s, real* w, int n) noexcept nogil:
    cdef int i
    for i in range(n):
        d[i] += (w[0] * s[i] + w[1] * s[i + 1] + w[2] * s[i + 2]
                 + w[3] * s[i + 3] + w[4] * s[i + 4] + w[5] * s[i + 5]
                 + w[6] * s[i + 6] + w[7] * s[i + 7] + w[8] * s[i + 8])


cdef inline void _corrg(real* d, real* s, real* w, int kw, int n) noexcept nogil:
    cdef int i, kj
    cdef real acc
    for i in range(n):
        acc = 0
        for kj in range(kw):
            acc += w[kj] * s[i + kj]
        d[i] += acc


cdef inline void _rows_corr(real* dst, real* src, real* wr,
                            int rows, int dld, int sld, int ki,
                            int kw, int n) noexcept nogil:
    # dst row r += correlation of src row (r + ki) with the kw taps in wr
    cdef int r
    if kw == 3:
        for r in range(rows):
            _corr3(dst + r * dld, src + (r + ki) * sld, wr, n)
    elif kw == 5:
        for r in range(rows):
            _corr5(dst + r * dld, src + (r + ki) * sld, wr, n)
    elif kw == 7:
        for r in range(rows):
            _corr7(dst + r * dld, src + (r + ki) * sld, wr, n)
    elif kw == 9:
        for r in range(rows):
            _corr9(dst + r * dld, src + (r + ki) * sld, wr, n)
    else:
        for r in range(rows):
            _corrg(dst + r * dld, src + (r + ki) * sld, wr, kw, n)


cdef void _st_forward(real* xp, real* w, real* out, int N, int groups,
                      int Cig, int Cog, int Hp, int Wp, int kh, int kw,
                      int Ho, int Wo) noexcept nogil:
    cdef int n, g, co, ci, ki
    cdef int Cin = groups * Cig, Cout = groups * Cog
    cdef real* oc
    cdef real* xc
    for n in range(N):
        for g in range(groups):
            for co in range(Cog):
                oc = out + ((n * Cout) + g * Cog + co) * Ho * Wo
                for ci in range(Cig):
                    xc = xp + ((n * Cin) + g * Cig + ci) * Hp * Wp
                    for ki in range(kh):
                        _rows_corr(oc, xc,
                                   w + (((g * Cog + co) * Cig + ci) * kh + ki) * kw,
                                   Ho, Wo, Wp, ki, kw, Wo)


cdef void _st_backward_data(real* gop, real* wf, real* gx, int N, int groups,
                            int Cig, int Cog, int Hgp, int Wgp, int kh, int kw,
                            int H, int W) noexcept nogil:
    # gx is the correlation of the padded upstream gradient with the
    # spatially flipped kernel wf
    cdef int n, g, co, ci, ki
    cdef int Cin = groups * Cig, Cout = groups * Cog
    cdef real* gc
    cdef real* oc
    for n in range(N):
        for g in range(groups):
            for ci in range(Cig):
                gc = gx + ((n * Cin) + g * Cig + ci) * H * W
                for co in range(Cog):
                    oc = gop + ((n * Cout) + g * Cog + co) * Hgp * Wgp
                    for ki in range(kh):
                        _rows_corr(gc, oc,
                                   wf + (((g * Cog + co) * Cig + ci) * kh + ki) * kw,
                                   H, W, Wgp, ki, kw, W)


cdef extern from *:
    # restrict lets gcc vectorize without runtime overlap checks; the
    # buffers really are disjoint (buf is scratch, a and b are inputs)
    """
    static inline void fsce_mula_f(float* restrict d, const float* restrict a,
                                   const float* restrict b, int n) {
        for (int i = 0; i < n; i++) d[i] += a[i] * b[i];
    }
    static inline void fsce_mula_d(double* restrict d, const double* restrict a,
                                   const double* restrict b, int n) {
        for (int i = 0; i < n; i++) d[i] += a[i] * b[i];
    }
    """
    void fsce_mula_f(float* d, const float* a, const float* b, int n) noexcept nogil
    void fsce_mula_d(double* d, const double* a, const double* b, int n) noexcept nogil


cdef inline void _mula(real* d, real* a, real* b, int n) noexcept nogil:
    if real is float:
        fsce_mula_f(<float*>d, <const float*>a, <const float*>b, n)
    else:
        fsce_mula_d(<double*>d, <const double*>a, <const double*>b, n)


cdef void _st_backward_weight(real* xp, real* gout, real* gw, real* buf,
                              int N, int groups, int Cig, int Cog,
                              int Hp, int Wp, int kh, int kw,
                              int Ho, int Wo) noexcept nogil:
    # buf (kw, Wo) collects per-column partial products per kernel row so
    # the inner loops have independent lanes; the horizontal sums happen
    # once per tap at the end
    cdef int n, g, co, ci, ki, kj, ho, i
    cdef int Cin = groups * Cig, Cout = groups * Cog
    cdef real acc
    cdef real* gc
    cdef real* xc
    cdef real* xr
    for g in range(groups):
        for co in range(Cog):
            for ci in range(Cig):
                for ki in range(kh):
                    for i in range(kw * Wo):
                        buf[i] = 0
                    for n in range(N):
                        gc = gout + ((n * Cout) + g * Cog + co) * Ho * Wo
                        xc = xp + ((n * Cin) + g * Cig + ci) * Hp * Wp
                        for ho in range(Ho):
                            xr = xc + (ho + ki) * Wp
                            for kj in range(kw):
                                _mula(buf + kj * Wo, gc + ho * Wo, xr + kj, Wo)
                    for kj in range(kw):
                        acc = 0
                        for i in range(Wo):
                            acc += buf[kj * Wo + i]
                        gw[(((g * Cog + co) * Cig + ci) * kh + ki) * kw + kj] += acc


cdef inline bint _stencil_shape(int stride, int padding, int kh,
                                int kw) noexcept nogil:
    # the padded-plane stencil only covers stride 1 and padding that fits
    # inside the flipped kernel's support
    return stride == 1 and padding <= kh - 1 and padding <= kw - 1


cdef inline bint _direct_fwd(int Cig, int Cog, int stride, int padding,
                             int kh, int kw, int Wo) noexcept nogil:
    # row passes beat im2col+GEMM when the channel block is small (the GEMM
    # is too thin) or the rows are long (the col matrix gets huge); at short
    # rows with many channels the GEMM amortizes better
    if not _stencil_shape(stride, padding, kh, kw):
        return False
    return Cig * Cog <= 16 or (Wo >= 32 and Cig * Cog <= 1024)


cdef inline bint _direct_bwt(int Cig, int Cog, int stride, int padding,
                             int kh, int kw) noexcept nogil:
    # the weight gradient keeps per-tap accumulator rows per (ci, co) pair,
    # which stops paying off beyond a few channels
    return _stencil_shape(stride, padding, kh, kw) and Cig * Cog <= 16


# ------------------------------------------------------------------ public

def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                   int stride=1, int padding=0, int groups=1):
    cdef int N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int Cout = w.shape[0], Cig = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef int Cog = Cout / groups
    cdef int Ho = (H + 2 * padding - kh) / stride + 1
    cdef int Wo = (W + 2 * padding - kw) / stride + 1
    dt = np.float32 if real is float else np.float64
    out_arr = np.zeros((N, Cout, Ho, Wo), dtype=dt)
    cdef real[:, :, :, ::1] out = out_arr
    cdef int n, g, K = Cig * kh * kw, P = Ho * Wo, NP = N * P
    cdef real[:, :, :, ::1] xpad
    if _direct_fwd(Cig, Cog, stride, padding, kh, kw, Wo):
        xpad = np.zeros((N, Cin, H + 2 * padding, W + 2 * padding), dtype=dt)
        with nogil:
            _pad_planes(&x[0, 0, 0, 0], &xpad[0, 0, 0, 0], N * Cin, H, W,
                        padding, padding)
            _st_forward(&xpad[0, 0, 0, 0], &w[0, 0, 0, 0], &out[0, 0, 0, 0],
                        N, groups, Cig, Cog, H + 2 * padding, W + 2 * padding,
                        kh, kw, Ho, Wo)
        return out_arr
    cdef real[:, ::1] col = np.empty((K, NP), dtype=dt)
    cdef real[:, ::1] buf = np.empty((Cog, NP), dtype=dt)
    with nogil:
        for g in range(groups):
            for n in range(N):
                _im2col(&x[n, g * Cig, 0, 0], Cig, H, W, kh, kw,
                        stride, padding, Ho, Wo, &col[0, n * P], NP)
            _gemm(False, False, Cog, NP, K,
                  <real>1, &w[g * Cog, 0, 0, 0], K, &col[0, 0], NP,
                  <real>0, &buf[0, 0], NP)
            _scatter(&buf[0, 0], &out[0, 0, 0, 0], N, Cout, Cog, g, P)
    return out_arr


def conv2d_backward_data(real[:, :, :, ::1] gout, real[:, :, :, ::1] w,
                         x_shape, int stride=1, int padding=0, int groups=1):
    cdef int N = gout.shape[0], Ho = gout.shape[2], Wo = gout.shape[3]
    cdef int Cout = w.shape[0], Cig = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef int Cin = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef int Cog = Cout / groups
    dt = np.float32 if real is float else np.float64
    gx_arr = np.zeros((N, Cin, H, W), dtype=dt)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef int n, g, K = Cig * kh * kw, P = Ho * Wo, NP = N * P
    cdef real[:, :, :, ::1] gopad
    cdef real[:, :, :, ::1] wf
    if _direct_fwd(Cig, Cog, stride, padding, kh, kw, W):
        gopad = np.zeros((N, Cout, H + kh - 1, W + kw - 1), dtype=dt)
        wf = np.ascontiguousarray(np.asarray(w)[:, :, ::-1, ::-1])
        with nogil:
            _pad_planes(&gout[0, 0, 0, 0], &gopad[0, 0, 0, 0], N * Cout, Ho, Wo,
                        kh - 1 - padding, kw - 1 - padding)
            _st_backward_data(&gopad[0, 0, 0, 0], &wf[0, 0, 0, 0], &gx[0, 0, 0, 0],
                              N, groups, Cig, Cog, H + kh - 1, W + kw - 1,
                              kh, kw, H, W)
        return gx_arr
    cdef real[:, ::1] col = np.empty((K, NP), dtype=dt)
    cdef real[:, ::1] buf = np.empty((Cog, NP), dtype=dt)
    with nogil:
        for g in range(groups):
            _gather(&gout[0, 0, 0, 0], &buf[0, 0], N, Cout, Cog, g, P)
            _gemm(True, False, K, NP, Cog,
                  <real>1, &w[g * Cog, 0, 0, 0], K, &buf[0, 0], NP,
                  <real>0, &col[0, 0], NP)
            for n in range(N):
                _col2im_add(&col[0, n * P], NP, Cig, H, W, kh, kw,
                            stride, padding, Ho, Wo, &gx[n, g * Cig, 0, 0])
    return gx_arr


def conv2d_backward_weight(real[:, :, :, ::1] x, real[:, :, :, ::1] gout,
                           w_shape, int stride=1, int padding=0, int groups=1):
    cdef int N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int Ho = gout.shape[2], Wo = gout.shape[3]
    cdef int Cout = w_shape[0], Cig = w_shape[1], kh = w_shape[2], kw = w_shape[3]
    cdef int Cog = Cout / groups
    dt = np.float32 if real is float else np.float64
    gw_arr = np.zeros((Cout, Cig, kh, kw), dtype=dt)
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef int n, g, K = Cig * kh * kw, P = Ho * Wo, NP = N * P
    cdef real[:, :, :, ::1] xpad
    cdef real[::1] wbuf
    if _direct_bwt(Cig, Cog, stride, padding, kh, kw):
        xpad = np.zeros((N, Cin, H + 2 * padding, W + 2 * padding), dtype=dt)
        wbuf = np.empty(kw * Wo, dtype=dt)
        with nogil:
            _pad_planes(&x[0, 0, 0, 0], &xpad[0, 0, 0, 0], N * Cin, H, W,
                        padding, padding)
            _st_backward_weight(&xpad[0, 0, 0, 0], &gout[0, 0, 0, 0],
                                &gw[0, 0, 0, 0], &wbuf[0], N, groups, Cig, Cog,
                                H + 2 * padding, W + 2 * padding, kh, kw, Ho, Wo)
        return gw_arr
    cdef real[:, ::1] col = np.empty((K, NP), dtype=dt)
    cdef real[:, ::1] buf = np.empty((Cog, NP), dtype=dt)
    with nogil:
        for g in range(groups):
            for n in range(N):
                _im2col(&x[n, g * Cig, 0, 0], Cig, H, W, kh, kw,
                        stride, padding, Ho, Wo, &col[0, n * P], NP)
            _gather(&gout[0, 0, 0, 0], &buf[0, 0], N, Cout, Cog, g, P)
            _gemm(False, True, Cog, K, NP,
                  <real>1, &buf[0, 0], NP, &col[0, 0], NP,
                  <real>0, &gw[g * Cog, 0, 0, 0], K)
    return gw_arr
