import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from jointcorr import kernels
from jointcorr.implicit import EllipsoidGenerator, VoxelGrid
from jointcorr.spatial import SurfaceIndex

from conftest import jittered_sphere

seeds = st.integers(0, 2**31 - 1)
needs_c = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")


def test_fallback_selected_by_environment():
    code = "from jointcorr import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True,
                         env={**os.environ, "JOINTCORR_PURE_PYTHON": "1"}).stdout.strip()
    assert out == "python"


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.fit_rotations(np.eye(3)[None], backend="fortran")


@needs_c
@given(seeds)
def test_mc_triangles_identical(seed):
    r = np.random.default_rng(seed)
    v = r.standard_normal((7, 6, 5))
    assert np.array_equal(kernels.mc_triangles(v, 0.1, backend="python"),
                          kernels.mc_triangles(v, 0.1, backend="cython"))
    g = VoxelGrid.from_bounds([-1.4] * 3, [1.4] * 3, 12)
    f = EllipsoidGenerator().value(g.points(), np.zeros(3)).reshape(g.dims)
    assert np.array_equal(kernels.mc_triangles(f, backend="python"), kernels.mc_triangles(f, backend="cython"))


@needs_c
@given(seeds)
def test_ring_covariance_identical(seed):
    m = jittered_sphere(1, seed % 1000)
    adj = m.adjacency
    cur = m.vertices + 0.1 * np.random.default_rng(seed).standard_normal(m.vertices.shape)
    a = kernels.ring_covariance(adj.indptr, adj.indices, m.vertices, cur, backend="python")
    b = kernels.ring_covariance(adj.indptr, adj.indices, m.vertices, cur, backend="cython")
    assert np.allclose(a, b, rtol=1e-13, atol=1e-14)


@needs_c
@given(seeds)
def test_closest_on_mesh_identical(seed):
    m = jittered_sphere(2, seed % 1000, amp=0.03)
    q = 1.5 * np.random.default_rng(seed).standard_normal((200, 3))
    pa, fa, da = SurfaceIndex(m, backend="python").query(q)
    pb, fb, db = SurfaceIndex(m, backend="cython").query(q)
    assert np.allclose(pa, pb, atol=1e-13) and np.allclose(da, db, rtol=1e-12, atol=1e-15)
    # faces may differ only when the closest point is shared by both (edge or vertex)
    diff = np.nonzero(fa != fb)[0]
    for i in diff:
        shared = np.intersect1d(m.faces[fa[i]], m.faces[fb[i]])
        assert shared.size >= 1
        assert np.linalg.norm(m.vertices[shared] - pa[i], axis=1).min() <= 1e-12 or shared.size == 2
