import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.io import mmread
from scipy.spatial.transform import Rotation

from jointcorr import deform
from jointcorr.mesh import TriMesh, graph_laplacian, icosphere, is_psd_sampled, is_symmetric

from conftest import BACKENDS, jittered_sphere, random_mesh

seeds = st.integers(0, 2**31 - 1)


def _unit(x):
    return x / np.linalg.norm(x)


@given(seeds, st.integers(20, 120))
def test_arap_matches_oracle(seed, n):
    rng = np.random.default_rng(seed)
    m = random_mesh(n, rng)
    f = deform.build_arap(m)
    d = rng.standard_normal(3 * m.n)
    o = deform.arap_energy_oracle(m, d)
    assert abs(f.energy(d) - o) <= 1e-8 * max(1.0, o)


@given(seeds, st.integers(20, 120))
def test_acap_matches_oracle(seed, n):
    rng = np.random.default_rng(seed)
    m = random_mesh(n, rng)
    f = deform.build_acap(m)
    d = rng.standard_normal(3 * m.n)
    o = deform.acap_energy_oracle(m, d)
    assert abs(f.energy(d) - o) <= 1e-8 * max(1.0, o)


@given(seeds)
def test_null_spaces(seed):
    rng = np.random.default_rng(seed)
    m = random_mesh(60, rng)
    a, c, comb = deform.build_arap(m), deform.build_acap(m), deform.build_combined(m)
    t = _unit(deform.translation_field(m.n, rng.standard_normal(3)))
    r = _unit(deform.rigid_field(m.vertices, rng.standard_normal(3), rng.standard_normal(3)))
    s = _unit(deform.similarity_field(m.vertices, rng.standard_normal(), rng.standard_normal(3),
                                      rng.standard_normal(3)))
    for form in (a, c, comb):
        assert abs(form.energy(t)) <= 1e-10
    assert abs(a.energy(r)) <= 1e-10
    assert abs(c.energy(s)) <= 1e-10
    assert a.energy(_unit(deform.similarity_field(m.vertices, 1.0))) > 1e-6


@given(seeds)
def test_forms_symmetric_psd_and_ordered(seed):
    rng = np.random.default_rng(seed)
    m = random_mesh(50, rng)
    a, c = deform.build_arap(m), deform.build_acap(m)
    for form in (a, c):
        assert is_symmetric(form.matrix)
        assert is_psd_sampled(form.matrix, rng)
    for _ in range(5):
        d = rng.standard_normal(3 * m.n)
        assert c.energy(d) <= a.energy(d) + 1e-9


@given(seeds)
def test_oracle_bounds(seed):
    rng = np.random.default_rng(seed)
    m = random_mesh(30, rng)
    d = rng.standard_normal(3 * m.n)
    L = graph_laplacian(m)
    lap = 2 * float(d.reshape(-1, 3).T.ravel() @ np.kron(np.eye(3), L.toarray()) @ d.reshape(-1, 3).T.ravel())
    a = deform.arap_energy_oracle(m, d)
    assert deform.acap_energy_oracle(m, d) <= a + 1e-9
    assert a <= lap + 1e-9


@given(seeds)
def test_rigid_motion_invariance(seed):
    rng = np.random.default_rng(seed)
    m = random_mesh(40, rng)
    R = Rotation.random(random_state=seed).as_matrix()
    moved = m.with_vertices(m.vertices @ R.T + rng.standard_normal(3))
    d = rng.standard_normal((m.n, 3))
    e0 = deform.build_arap(m).energy(d)
    e1 = deform.build_arap(moved).energy(d @ R.T)
    assert abs(e0 - e1) <= 1e-8 * e0


def test_zero_field_oracles():
    m = icosphere(1)
    z = np.zeros(3 * m.n)
    assert deform.arap_energy_oracle(m, z) == 0
    assert deform.acap_energy_oracle(m, z) == 0


def test_single_edge_stretch():
    v = np.array([[0, 0, 0], [1, 0, 0]], float)
    d = [0, 0, 0, 0.1, 0, 0]
    assert deform.arap_energy_oracle(v, d, edges=[[0, 1]]) == pytest.approx(2 * 0.01, rel=1e-12)
    assert deform.build_arap(v, edges=[[0, 1]]).energy(d) == pytest.approx(0.02, rel=1e-10)


def test_combined_is_weighted_sum():
    m = jittered_sphere(1, 0)
    a, c = deform.build_arap(m).matrix, deform.build_acap(m).matrix
    comb = deform.build_combined(m, 3.5).matrix
    assert abs(comb - (3.5 * a + c)).max() <= 1e-12
    assert abs(deform.build_combined(m, 0).matrix - c).max() == 0
    assert deform.DEFAULT_ALPHA == 10
    with pytest.raises(ValueError):
        deform.build_combined(m, -1)


def test_isolated_vertex_flagged():
    m = icosphere(1)
    iso = TriMesh(np.vstack([m.vertices, [[3, 3, 3]]]), m.faces)
    f = deform.build_arap(iso)
    assert f.diagnostics["isolated_vertices"] == [m.n]
    assert abs(f.matrix[:, 3 * m.n:]).max() == 0


def test_collinear_ring_regularized():
    # vertex 0 only sees collinear edges
    v = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0]], float)
    f = deform.build_acap(v, edges=[[0, 1], [0, 2]])
    assert 0 in f.diagnostics["regularized_vertices"]
    d = np.random.default_rng(0).standard_normal(9)
    o = deform.acap_energy_oracle(v, d, edges=[[0, 1], [0, 2]])
    assert abs(f.energy(d) - o) <= 1e-6 * max(1.0, o)


@pytest.mark.parametrize("kind", ["arap", "acap"])
def test_backends_agree(kind):
    m = jittered_sphere(2, 7)
    mats = [deform._assemble(m, kind, backend=b)[0] for b in BACKENDS]
    for other in mats[1:]:
        assert abs(mats[0] - other).max() <= 1e-12


def test_matrix_market_dump(tmp_path):
    m = jittered_sphere(1, 1)
    f = deform.build_arap(m)
    p = tmp_path / "L.mtx"
    f.save_mtx(p)
    back = mmread(str(p)).tocsr()
    assert abs(back - f.matrix).max() <= 1e-15
