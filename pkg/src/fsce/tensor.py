"""Dense NCHW tensors with taped reverse-mode differentiation.

Design, in brief: every differentiable op computes its result eagerly with
NumPy (convolutions go through fsce.backend), and, when a Tape is active,
appends (output, backward_fn) to that tape in execution order. Tape.backward
seeds d(loss)/d(loss) = 1 and walks the records once in exact reverse
execution order; each backward_fn receives the output gradient and adds
each input's contribution onto input.grad. Tensors flagged constant never
receive gradients, which is also how detaching works.

Conventions that the rest of the package relies on:

- feature maps are (N, C, H, W); conv weights are (Cout, Cin/groups, kh, kw)
- pooling uses square windows with stride == window and drops the trailing
  remainder rows/cols (floor semantics)
- max reductions break ties toward the first index in row-major scan order,
  so repeated runs take identical backward paths
- ops never mutate their input arrays; the optimizer is the only code that
  writes into Parameter.data
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import backend
from .errors import ConfigError, ContractError, DegenerateStatsError, ShapeError

__all__ = [
    "Tensor", "Parameter", "Tape", "no_grad",
    "add", "sub", "mul", "scale", "neg", "matmul", "mlp2",
    "tsum", "tmean", "max_reduce", "relu", "sigmoid",
    "softmax", "log_softmax", "reshape", "concat", "narrow", "detach",
    "conv2d", "avg_pool2d", "max_pool2d", "adaptive_avg_pool2d",
    "batch_norm2d",
]


class Tensor:
    """A NumPy array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "constant")

    def __init__(self, data, dtype=None, constant: bool = False):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.constant = constant

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, constant=True)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # ergonomic operators; scalars are folded in as constants
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise ConfigError("tensor/tensor division is not provided; divide by a scalar")

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _bad_item(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """Trainable leaf. Its gradient buffer always exists and starts at zero."""

    __slots__ = ("name",)

    def __init__(self, data, dtype=None, name: str = ""):
        super().__init__(np.array(data, dtype=dtype), constant=False)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name or '?'}, shape={self.data.shape})"


# --------------------------------------------------------------- tape plumbing

_STACK: list["Tape | None"] = []


class Tape:
    """Records ops while active (as a context manager) and replays them in
    reverse on backward(). One backward call per recording; make a new Tape
    for every loss evaluation."""

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise ContractError("backward called on a non-finite loss")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


class no_grad:
    """Context manager that suspends recording inside an active tape."""

    def __enter__(self):
        _STACK.append(None)
        return self

    def __exit__(self, *exc):
        _STACK.pop()
        return False


def _tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


def _wrap(v, like: Tensor) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return Tensor(np.asarray(v, dtype=like.dtype), constant=True)


def _acc(t: Tensor, g: np.ndarray):
    if t.constant:
        return
    if t.grad is None:
        # copy: g may be a view into another gradient buffer
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _emit(inputs: Sequence[Tensor], data: np.ndarray,
          backward: Callable[[np.ndarray], None] | None) -> Tensor:
    tape = _tape()
    out = Tensor(data)
    if tape is not None and backward is not None and any(not t.constant for t in inputs):
        out.constant = False
        tape._records.append((out, backward))
    else:
        out.constant = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g.reshape(shape)


def _check_same_dtype(*ts: Tensor):
    d0 = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d0:
            raise ConfigError(f"mixed dtypes in one op: {d0} vs {t.dtype}")


# ------------------------------------------------------------- basic algebra

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data + b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _emit((a, b), data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data - b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _emit((a, b), data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with NumPy broadcasting."""
    _check_same_dtype(a, b)
    data = a.data * b.data

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _emit((a, b), data, backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    data = a.data * np.asarray(s, dtype=a.dtype)

    def backward(g):
        _acc(a, g * np.asarray(s, dtype=a.dtype))

    return _emit((a,), data, backward)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul is 2-D only, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _check_same_dtype(a, b)
    data = a.data @ b.data

    def backward(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _emit((a, b), data, backward)


def mlp2(v: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Two-layer perceptron v -> W2 @ relu(W1 @ v), batch rows in v (N, C).

    w1 is (hidden, C), w2 is (C_out, hidden). Passing the same Parameter
    objects at two call sites shares the weights: gradients accumulate.
    """
    if v.ndim != 2:
        raise ShapeError(f"mlp2 input must be (N, C), got {v.shape}")
    h = relu(matmul(v, transpose2d(w1)))
    return matmul(h, transpose2d(w2))


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d needs a matrix, got {a.shape}")
    data = a.data.T.copy()

    def backward(g):
        _acc(a, g.T)

    return _emit((a,), data, backward)


# ---------------------------------------------------------------- reductions

def _norm_axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def tsum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, a.ndim)
    data = a.data.sum(axis=ax, keepdims=keepdims)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, ax)
        _acc(a, np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False))

    return _emit((a,), data, backward)


def tmean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    if count == 0:
        raise DegenerateStatsError("mean over an empty axis")
    return scale(tsum(a, ax, keepdims), 1.0 / count)


def max_reduce(a: Tensor, axes, keepdims: bool = True) -> Tensor:
    """Max over the given axes. Backward routes the whole gradient to the
    first maximal element (row-major over the reduced axes)."""
    ax = _norm_axes(axes, a.ndim)
    lead_axes = tuple(i for i in range(a.ndim) if i not in ax)
    moved = np.transpose(a.data, lead_axes + ax)
    lead_shape = moved.shape[:len(lead_axes)]
    flat = moved.reshape(lead_shape + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], -1)[..., 0]
    out_shape = tuple(1 if i in ax else s for i, s in enumerate(a.shape)) if keepdims \
        else tuple(s for i, s in enumerate(a.shape) if i not in ax)
    data = out.reshape(out_shape)

    def backward(g):
        gflat = np.zeros(lead_shape + (flat.shape[-1],), dtype=a.dtype)
        np.put_along_axis(gflat, idx[..., None], g.reshape(lead_shape + (1,)), -1)
        gmoved = gflat.reshape(moved.shape)
        inv = np.argsort(lead_axes + ax)
        _acc(a, np.transpose(gmoved, inv))

    return _emit((a,), data, backward)


# -------------------------------------------------------------- nonlinearities

def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        _acc(a, np.where(a.data > 0, g, np.asarray(0, dtype=a.dtype)))

    return _emit((a,), data, backward)


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = 1.0 / (1.0 + np.exp(-a.data))
    data = data.astype(a.dtype, copy=False)

    def backward(g):
        _acc(a, g * data * (1.0 - data))

    return _emit((a,), data, backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; rows sum to one."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _acc(a, data * (g - dot))

    return _emit((a,), data, backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse

    def backward(g):
        _acc(a, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _emit((a,), data, backward)


# ------------------------------------------------------------- shape plumbing

def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _acc(a, g.reshape(a.shape))

    return _emit((a,), data, backward)


def concat(parts: Iterable[Tensor], axis: int = 1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    _check_same_dtype(*parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(p, g[tuple(sl)])

    return _emit(tuple(parts), data, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (the channel-split primitive)."""
    if start < 0 or length < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range "
                         f"for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = a.data[sl].copy()

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[sl] = g
        _acc(a, gx)

    return _emit((a,), data, backward)


def detach(a: Tensor) -> Tensor:
    return a.detach()


# ----------------------------------------------------------------- conv/pool

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D convolution (cross-correlation), odd square-ish kernels.

    x (N, Cin, H, W), w (Cout, Cin/groups, kh, kw), optional bias (Cout,).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d wants 4-D x and w, got {x.shape} and {w.shape}")
    N, Cin, H, W = x.shape
    Cout, Cig, kh, kw = w.shape
    if stride < 1 or padding < 0:
        raise ConfigError(f"bad stride/padding {stride}/{padding}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel dims must be odd, got {kh}x{kw}")
    if groups < 1 or Cin % groups or Cout % groups:
        raise ConfigError(f"groups={groups} does not divide Cin={Cin}, Cout={Cout}")
    if Cig != Cin // groups:
        raise ShapeError(f"weight expects Cin/groups={Cig}, input gives {Cin // groups}")
    if b is not None and b.shape != (Cout,):
        raise ShapeError(f"bias must be ({Cout},), got {b.shape}")
    if (H + 2 * padding - kh) < 0 or (W + 2 * padding - kw) < 0:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H}x{W} (pad {padding})")
    _check_same_dtype(x, w, *(() if b is None else (b,)))

    data = backend.conv2d_forward(x.data, w.data, stride, padding, groups)
    if b is not None:
        data += b.data.reshape(1, Cout, 1, 1)

    def backward(g):
        g = np.ascontiguousarray(g)
        if not x.constant:
            _acc(x, backend.conv2d_backward_data(g, w.data, x.shape,
                                                 stride, padding, groups))
        if not w.constant:
            _acc(w, backend.conv2d_backward_weight(x.data, g, w.shape,
                                                   stride, padding, groups))
        if b is not None and not b.constant:
            _acc(b, g.sum(axis=(0, 2, 3)))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(inputs, data, backward)


def _pool_check(x: Tensor, window: int):
    if x.ndim != 4:
        raise ShapeError(f"pooling wants NCHW, got {x.shape}")
    if window < 1:
        raise ConfigError(f"pool window must be >= 1, got {window}")
    N, C, H, W = x.shape
    Ho, Wo = H // window, W // window
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"pool window {window} larger than input {H}x{W}")
    return N, C, Ho, Wo


def avg_pool2d(x: Tensor, window: int) -> Tensor:
    """Square window, stride == window, trailing remainder dropped."""
    N, C, Ho, Wo = _pool_check(x, window)
    k = window
    crop = x.data[:, :, :Ho * k, :Wo * k]
    data = crop.reshape(N, C, Ho, k, Wo, k).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :Ho * k, :Wo * k] = np.repeat(
            np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        _acc(x, gx)

    return _emit((x,), data, backward)


def max_pool2d(x: Tensor, window: int) -> Tensor:
    """Square window, stride == window; ties go to the first element of the
    window in row-major order."""
    N, C, Ho, Wo = _pool_check(x, window)
    k = window
    crop = x.data[:, :, :Ho * k, :Wo * k]
    win = crop.reshape(N, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5) \
              .reshape(N, C, Ho, Wo, k * k)
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], -1)[..., 0]

    def backward(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], -1)
        gx = np.zeros_like(x.data)
        gx[:, :, :Ho * k, :Wo * k] = gwin.reshape(N, C, Ho, Wo, k, k) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho * k, Wo * k)
        _acc(x, gx)

    return _emit((x,), data, backward)


def adaptive_avg_pool2d(x: Tensor, out_hw) -> Tensor:
    """Average pooling to a target (h, w) with bin i covering
    [floor(i*H/h), ceil((i+1)*H/h)). Target == input dims is the identity."""
    if x.ndim != 4:
        raise ShapeError(f"pooling wants NCHW, got {x.shape}")
    th, tw = out_hw
    N, C, H, W = x.shape
    if th < 1 or tw < 1 or th > H or tw > W:
        raise ShapeError(f"adaptive target {th}x{tw} invalid for input {H}x{W}")
    if (th, tw) == (H, W):
        return x
    hb = [(i * H // th, -(-((i + 1) * H) // th)) for i in range(th)]
    wb = [(j * W // tw, -(-((j + 1) * W) // tw)) for j in range(tw)]
    data = np.empty((N, C, th, tw), dtype=x.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            data[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                area = (h1 - h0) * (w1 - w0)
                gx[:, :, h0:h1, w0:w1] += g[:, :, i:i + 1, j:j + 1] / area
        _acc(x, gx)

    return _emit((x,), data, backward)


# ------------------------------------------------------------------ batchnorm

def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray, *,
                 training: bool, momentum: float = 0.1,
                 eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, like the common convention).
    A training batch with a single value per channel has no variance to
    estimate and raises DegenerateStatsError.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d wants NCHW, got {x.shape}")
    N, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"affine params must be ({C},)")
    m = N * H * W
    if training:
        if m < 2:
            raise DegenerateStatsError(
                f"batch statistics over {m} value(s) per channel are degenerate")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1.0))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
    xhat = xhat.astype(x.dtype, copy=False)
    data = gamma.data.reshape(1, C, 1, 1) * xhat + beta.data.reshape(1, C, 1, 1)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = (g * xhat).sum(axis=(0, 2, 3))
        _acc(beta, gb)
        _acc(gamma, gg)
        if x.constant:
            return
        scale = (gamma.data * inv).reshape(1, C, 1, 1)
        if training:
            # sum(g * gamma) = gamma * gb and sum(g * gamma * xhat) =
            # gamma * gg, so the centering terms reuse the affine gradients
            # instead of two more full-tensor reductions
            gx = g - gb.reshape(1, C, 1, 1) / m
            gx -= xhat * (gg.reshape(1, C, 1, 1) / m)
            gx *= scale
        else:
            gx = g * scale
        _acc(x, gx.astype(x.dtype, copy=False))

    return _emit((x, gamma, beta), data, backward)
