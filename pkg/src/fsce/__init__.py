"""Frequency-spatial feature enhancement with online distillation.

Importing this package caps BLAS/OpenMP thread pools according to the
FSCE_THREADS environment variable (default "1", the documented
determinism mode). The cap must be in place before NumPy loads its BLAS,
so import fsce before (or instead of) importing numpy directly in
entry points that care about reproducibility.
"""

import os as _os

_threads = _os.environ.get("FSCE_THREADS", "1")
for _var in (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    _os.environ.setdefault(_var, _threads)

try:  # best effort when numpy was already imported by the host process
    from threadpoolctl import threadpool_limits as _limits

    _limits(limits=int(_threads))
except Exception:
    pass

from .errors import (
    FsceError,
    ConfigError,
    ShapeError,
    ContractError,
    DataError,
    FormatError,
    DegenerateStatsError,
    TrainingDivergedError,
)
from .tensor import Tensor, Parameter, Tape, no_grad

__version__ = "0.1.0"

__all__ = [
    "FsceError",
    "ConfigError",
    "ShapeError",
    "ContractError",
    "DataError",
    "FormatError",
    "DegenerateStatsError",
    "TrainingDivergedError",
    "Tensor",
    "Parameter",
    "Tape",
    "no_grad",
    "__version__",
]
