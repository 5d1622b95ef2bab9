"""Convolution backend selection.

The compiled extension is preferred when it imported cleanly; the NumPy
implementation is the fallback. FSCE_BACKEND=numpy or FSCE_BACKEND=compiled
forces the choice (forcing the compiled backend when the extension is
missing raises, silence would mask a broken build).

Both backends implement the same three entry points with identical
semantics; they agree to floating-point reorder tolerance, not bitwise.
Within one backend results are bitwise reproducible.
"""

import os

import numpy as np

from ..errors import ConfigError
from . import numpy_backend

try:
    from . import _kernels
except ImportError:
    _kernels = None

_requested = os.environ.get("FSCE_BACKEND", "").strip().lower()
if _requested not in ("", "numpy", "compiled"):
    raise ConfigError(f"FSCE_BACKEND must be 'numpy' or 'compiled', got {_requested!r}")
if _requested == "compiled" and _kernels is None:
    raise ConfigError("FSCE_BACKEND=compiled but the compiled kernels are not built")

_use_compiled = _kernels is not None and _requested != "numpy"

name = "compiled" if _use_compiled else "numpy"


def available_backends() -> tuple[str, ...]:
    return ("numpy", "compiled") if _kernels is not None else ("numpy",)


def _as_c(a):
    return np.ascontiguousarray(a)


if _use_compiled:

    def conv2d_forward(x, w, stride=1, padding=0, groups=1):
        return _kernels.conv2d_forward(_as_c(x), _as_c(w), stride, padding, groups)

    def conv2d_backward_data(gout, w, x_shape, stride=1, padding=0, groups=1):
        return _kernels.conv2d_backward_data(_as_c(gout), _as_c(w), tuple(x_shape),
                                             stride, padding, groups)

    def conv2d_backward_weight(x, gout, w_shape, stride=1, padding=0, groups=1):
        return _kernels.conv2d_backward_weight(_as_c(x), _as_c(gout), tuple(w_shape),
                                               stride, padding, groups)

else:
    conv2d_forward = numpy_backend.conv2d_forward
    conv2d_backward_data = numpy_backend.conv2d_backward_data
    conv2d_backward_weight = numpy_backend.conv2d_backward_weight
