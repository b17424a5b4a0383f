"""Hot loops with a compiled backend and a numpy fallback.

The compiled module is used when importable; setting the environment
variable ``JOINTCORR_PURE_PYTHON=1`` forces the fallback.  ``BACKEND``
names the active choice.
"""
import os

import numpy as np

from . import _fallback

_c = None
if os.environ.get("JOINTCORR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _c
    except ImportError:
        _c = None

BACKEND = "cython" if _c is not None else "python"


def _impl(name, backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _c is None:
            raise RuntimeError("compiled kernels are not available")
        return getattr(_c, name)
    if backend == "python":
        return getattr(_fallback, name)
    raise ValueError(f"unknown backend {backend!r}")


def mc_triangles(values, iso=0.0, backend=None):
    """Marching-cubes triangles as (m, 3) global edge ids.

    Edge id = 3 * (C-order index of the edge's lower grid point) + axis.
    """
    v = np.ascontiguousarray(values, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 2:
        raise ValueError("values must be a 3D grid with at least 2 samples per axis")
    return _impl("mc_triangles", backend)(v, float(iso))


def deform_scatter(indptr, indices, P, Hinv, backend=None):
    """COO (rows, cols, vals) of the eliminated per-vertex quadratic forms."""
    return _impl("deform_scatter", backend)(
        np.ascontiguousarray(indptr, dtype=np.int64),
        np.ascontiguousarray(indices, dtype=np.int64),
        np.ascontiguousarray(P, dtype=np.float64),
        np.ascontiguousarray(Hinv, dtype=np.float64))


def ring_covariance(indptr, indices, rest, cur, backend=None):
    """(n, 3, 3) one-ring covariances used by the ARAP local step."""
    return _impl("ring_covariance", backend)(
        np.ascontiguousarray(indptr, dtype=np.int64),
        np.ascontiguousarray(indices, dtype=np.int64),
        np.ascontiguousarray(rest, dtype=np.float64),
        np.ascontiguousarray(cur, dtype=np.float64))


def fit_rotations(S, backend=None):
    """Rotations in SO(3) maximising tr(R S_i) for a stack of 3x3 matrices.

    Both backends agree whenever the maximiser is unique; for rank-deficient
    ``S_i`` any maximiser may be returned.
    """
    return _impl("fit_rotations", backend)(np.ascontiguousarray(S, dtype=np.float64).reshape(-1, 3, 3))


def closest_on_mesh(q, vidx, inc_ptr, inc_idx, V, F, backend=None):
    """Closest points on the faces incident to each query's candidate vertices.

    Returns (points, face indices, squared distances); exact ties go to the
    lowest face index.  When the closest point lies on an edge or vertex
    shared by several faces, rounding decides the face and backends may
    report different (equally valid) faces.
    """
    return _impl("closest_on_mesh", backend)(
        np.ascontiguousarray(q, dtype=np.float64),
        np.ascontiguousarray(vidx, dtype=np.int64),
        np.ascontiguousarray(inc_ptr, dtype=np.int64),
        np.ascontiguousarray(inc_idx, dtype=np.int64),
        np.ascontiguousarray(V, dtype=np.float64),
        np.ascontiguousarray(F, dtype=np.int64))
