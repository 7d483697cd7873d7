"""Trajectory kernels: compiled extension when available, numpy fallback.

Both backends expose the same two entry points over packed sparse-polynomial
tables:

    avf_trajectory(...)    implicit energy-preserving substep + friction/noise
    tamed_trajectory(...)  drift-tamed explicit stepping

The compiled backend is built by setup.py; when the extension is missing the
pure-Python twin is used: same algorithm, slower, with outputs agreeing to
floating-point roundoff (association order differs through BLAS/LAPACK).
"""

from __future__ import annotations

import numpy as np

try:  # pragma: no cover - exercised by whichever build is present
    from . import _cykernels as _impl
    BACKEND = "compiled"
except ImportError:  # pragma: no cover
    from . import _pykernels as _impl
    BACKEND = "python"

avf_trajectory = _impl.avf_trajectory
tamed_trajectory = _impl.tamed_trajectory

MAX_KERNEL_DIM = 8


def get_backend(name: str):
    """Return the kernel module for 'compiled' or 'python' (tests/benchmarks)."""
    if name == "python":
        from . import _pykernels
        return _pykernels
    if name == "compiled":
        from . import _cykernels
        return _cykernels
    raise ValueError("unknown backend %r" % name)


def poly_pack(potential) -> dict:
    """Flatten a polynomial PotentialSpec into contiguous kernel tables.

    Layout: value poly (vc, ve); gradient polys concatenated with offsets
    (gc, ge, goff) for coordinates 0..m-1; Hessian upper-triangle polys in
    row-major (i, j>=i) order (hc, he, hoff).
    """
    if potential.terms is None:
        raise ValueError("potential has no coefficient table")
    m = potential.dimension
    vc = np.array([c for c, _ in potential.terms], dtype=np.float64)
    ve = np.array([es for _, es in potential.terms], dtype=np.int64).reshape(len(potential.terms), m)

    def _concat(packs):
        cs = [np.asarray(c, dtype=np.float64) for c, _ in packs]
        es = [np.asarray(e, dtype=np.int64).reshape(-1, m) for _, e in packs]
        off = np.zeros(len(packs) + 1, dtype=np.int64)
        off[1:] = np.cumsum([c.size for c in cs])
        cat_c = np.concatenate(cs) if off[-1] else np.zeros(0, dtype=np.float64)
        cat_e = np.concatenate(es) if off[-1] else np.zeros((0, m), dtype=np.int64)
        return np.ascontiguousarray(cat_c), np.ascontiguousarray(cat_e), off

    gc, ge, goff = _concat(potential.grad_terms)
    hc, he, hoff = _concat(potential.hess_terms)
    return {
        "m": m,
        "vc": np.ascontiguousarray(vc), "ve": np.ascontiguousarray(ve),
        "gc": gc, "ge": ge, "goff": goff,
        "hc": hc, "he": he, "hoff": hoff,
    }
