"""Reservoir stepping kernels: compiled core with a pure-numpy fallback.

The backend is selected once at import: the compiled extension when it is
available, otherwise the numpy fallback. Set XSRC_KERNELS=pure or
XSRC_KERNELS=native to force a choice (native raises if the extension is
missing).

The two backends perform the same arithmetic in the same order; they differ
only in tanh rounding (libm vs numpy's vectorized tanh, ~1 ulp) and, for
``step``, in the input-matvec reduction order. Within one backend all results
are bit-reproducible. ``benchmarks/bench_kernels.py`` compares their speed.
"""

from __future__ import annotations

import os

import numpy as np

from . import pure

try:
    from . import _native
except ImportError:  # build without compiled extension
    _native = None

_requested = os.environ.get("XSRC_KERNELS", "").strip().lower()
if _requested == "pure":
    _backend_name = "pure"
elif _requested == "native":
    if _native is None:
        raise ImportError(
            "XSRC_KERNELS=native requested but the compiled extension is not built"
        )
    _backend_name = "native"
elif _requested:
    raise ImportError(f"unknown XSRC_KERNELS value {_requested!r}")
else:
    _backend_name = "native" if _native is not None else "pure"


def backend_name() -> str:
    return _backend_name


def available_backends() -> tuple[str, ...]:
    return ("pure", "native") if _native is not None else ("pure",)


def _csr_parts(W):
    data = np.ascontiguousarray(W.data, dtype=np.float64)
    indices = np.ascontiguousarray(W.indices, dtype=np.int32)
    indptr = np.ascontiguousarray(W.indptr, dtype=np.int32)
    return data, indices, indptr


def drive(W, proj, r0, alpha, backend=None):
    """Teacher-forced evolution; ``proj`` holds W_in @ u(t) row per step.

    Returns all states, one row per step, shape (n_steps, d_r).
    """
    name = backend or _backend_name
    proj = np.ascontiguousarray(proj, dtype=np.float64)
    r0 = np.ascontiguousarray(r0, dtype=np.float64)
    if name == "pure":
        return pure.drive(W, proj, r0, float(alpha))
    data, indices, indptr = _csr_parts(W)
    return _native.drive(data, indices, indptr, proj, r0, float(alpha))


def step(W, W_in, u, r, alpha, backend=None):
    """One closed-loop step with raw input; returns (r_next, preact_absmax)."""
    name = backend or _backend_name
    if name == "pure":
        return pure.step(W, W_in, u, r, float(alpha))
    data, indices, indptr = _csr_parts(W)
    u = np.ascontiguousarray(u, dtype=np.float64)
    r = np.ascontiguousarray(r, dtype=np.float64)
    W_in = np.ascontiguousarray(W_in, dtype=np.float64)
    return _native.step(data, indices, indptr, W_in, u, r, float(alpha))
