import numpy as np
import pytest
from hypothesis import settings

from jointcorr import kernels
from jointcorr.mesh import TriMesh, icosphere

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")

BACKENDS = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tetra():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriMesh(v, f)


def jittered_sphere(level, seed, amp=0.05):
    m = icosphere(level)
    r = np.random.default_rng(seed)
    return m.with_vertices(m.vertices + amp * r.standard_normal(m.vertices.shape))


def random_mesh(n, rng):
    """Closed triangulation of n random points (hull of sphere samples, then radially jittered)."""
    from scipy.spatial import ConvexHull
    u = rng.standard_normal((n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    hull = ConvexHull(u)
    f = hull.simplices.copy()
    c = u[f].mean(axis=1)
    flip = np.einsum("ij,ij->i", np.cross(u[f[:, 1]] - u[f[:, 0]], u[f[:, 2]] - u[f[:, 0]]), c) < 0
    f[flip] = f[flip][:, [0, 2, 1]]
    return TriMesh(u * rng.uniform(0.7, 1.3, (n, 1)), f)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
