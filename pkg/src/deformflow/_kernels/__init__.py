"""Hot-kernel backend selection.

The compiled extension (Cython + BLAS) is preferred; the numpy fallback is
selected when the extension is unavailable or DFLOW_PURE=1 is set.  Both
expose the same two functions with identical semantics; scripts/bench_backends.py
compares their throughput.
"""

import os

import numpy as np

from . import pure as _pure

if os.environ.get("DFLOW_PURE") == "1":
    _impl = _pure
    BACKEND = "pure"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _impl = _pure
        BACKEND = "pure"

member_size = _pure.member_size


def _ready(a, dtype):
    return (
        isinstance(a, np.ndarray) and a.dtype == dtype
        and a.flags.c_contiguous and a.flags.writeable
    )


def _as_input(a, dtype):
    if _ready(a, dtype):
        return a
    out = np.ascontiguousarray(a, dtype=dtype)
    if not out.flags.writeable:
        out = out.copy()
    return out


def _clean(w, dims, X, kappa):
    w = _as_input(w, np.float64)
    dims = _as_input(dims, np.int64)
    X = _as_input(X, np.float64)
    kappa = _as_input(kappa, np.float64)
    if X.ndim != 2 or X.shape[1] != dims[0]:
        raise ValueError(f"input layer expects dim {dims[0]}, got batch shape {X.shape}")
    if kappa.ndim != 2 or kappa.shape[0] != X.shape[0]:
        raise ValueError("kappa must be (rows, K)")
    if w.shape[0] != kappa.shape[1] * member_size(dims):
        raise ValueError(
            f"parameter slice holds {w.shape[0]} values, ensemble needs "
            f"{kappa.shape[1] * member_size(dims)}"
        )
    return w, dims, X, kappa


def ensemble_forward(w, dims, X, kappa):
    w, dims, X, kappa = _clean(w, dims, X, kappa)
    return _impl.ensemble_forward(w, dims, X, kappa)


def ensemble_backward(w, dims, X, kappa, dY):
    w, dims, X, kappa = _clean(w, dims, X, kappa)
    dY = np.ascontiguousarray(dY, dtype=np.float64)
    return _impl.ensemble_backward(w, dims, X, kappa, dY)


def forward_pure(w, dims, X, kappa):
    """Always-numpy variant (reference for backend-agreement tests)."""
    w, dims, X, kappa = _clean(w, dims, X, kappa)
    return _pure.ensemble_forward(w, dims, X, kappa)


def backward_pure(w, dims, X, kappa, dY):
    w, dims, X, kappa = _clean(w, dims, X, kappa)
    dY = np.ascontiguousarray(dY, dtype=np.float64)
    return _pure.ensemble_backward(w, dims, X, kappa, dY)
