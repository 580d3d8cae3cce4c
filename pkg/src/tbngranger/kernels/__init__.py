"""Hot numeric kernels with a compiled core and a NumPy fallback.

The compiled extension is picked at import when it was built; set
``TBNGRANGER_PURE=1`` to force the NumPy path. ``BACKEND`` names the active
implementation and both modules stay importable for cross-checks.
"""
import os

import numpy as np

from . import _pykernels as py

c = None
if not os.environ.get("TBNGRANGER_PURE"):
    try:
        from . import _ckernels as c
    except ImportError:  # extension not built
        c = None

_impl = c if c is not None else py
BACKEND = "cython" if c is not None else "numpy"

lorenz96_rk4 = _impl.lorenz96_rk4
var_simulate = _impl.var_simulate

# the compiled acyclicity kernel uses plain loops; BLAS matmul wins once B * N^3
# exceeds ~2e4 (see benchmarks/bench_kernels.py)
_ACYC_COMPILED_MAX_WORK = 20_000


def acyclicity_batch(A, clamp):
    """(alpha [B], grad [B, N, N]) for a batch of adjacencies; backend chosen by size."""
    A = np.asarray(A, dtype=np.float64)
    if c is not None and A.shape[0] * A.shape[-1] ** 3 <= _ACYC_COMPILED_MAX_WORK:
        return c.acyclicity_batch(A, clamp)
    return py.acyclicity_batch(A, clamp)


canonical_bmm = _impl.canonical_bmm

__all__ = [
    "BACKEND",
    "acyclicity_batch",
    "canonical_bmm",
    "lorenz96_rk4",
    "var_simulate",
]
