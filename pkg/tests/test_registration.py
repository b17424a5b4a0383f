import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from jointcorr import kernels
from jointcorr.errors import EmptySurfaceError, GraphError
from jointcorr.implicit import BumpFieldGenerator, EllipsoidGenerator, SphereGenerator, VoxelGrid
from jointcorr.marching import marching_cubes
from jointcorr.mesh import TriMesh, icosphere
from jointcorr.registration import (DEFAULT_K_ANIMAL, DEFAULT_K_HUMAN, RegistrationConfig, ShapeGraph,
                                    arap_deformation_energy, build_shape_graph, edge_distortion,
                                    propagate_correspondences, register_along_path, register_arap,
                                    register_graph_edges, shortest_paths)

from conftest import BACKENDS

seeds = st.integers(0, 2**31 - 1)


def _asymmetric(level=2):
    r = np.random.default_rng(0)
    g = BumpFieldGenerator(8, basis="gaussian")
    m = icosphere(level)
    v = m.vertices * g.radius(m.vertices, 0.2 * r.standard_normal(8))[:, None] * [1, 0.8, 0.6]
    return TriMesh(v, m.faces)


@pytest.fixture(scope="module")
def ellipsoid_run():
    s = icosphere(3)
    et = marching_cubes(EllipsoidGenerator(), EllipsoidGenerator.code_for_axes([1, 1, 1.3]),
                        VoxelGrid.from_bounds([-1.5] * 3, [1.5] * 3, 40))
    return s, et, register_arap(s, et)


def test_fixed_point():
    m = _asymmetric()
    r = register_arap(m, m)
    assert r.data_residual <= 1e-12
    assert np.abs(r.deformed.vertices - m.vertices).max() <= 1e-9
    assert np.array_equal(r.deformed.faces, m.faces)


def test_rigid_rotation_recovered():
    m = _asymmetric()
    R = Rotation.from_euler("z", 10, degrees=True).as_matrix()
    tgt = m.with_vertices(m.vertices @ R.T + [0.05, 0, 0])
    r = register_arap(m, tgt)
    assert r.data_residual <= 1e-8
    assert r.arap_energy <= 1e-6


def test_sphere_to_ellipsoid_within_50_iterations():
    s = icosphere(3)
    et = marching_cubes(EllipsoidGenerator(), EllipsoidGenerator.code_for_axes([1, 1, 1.3]),
                        VoxelGrid.from_bounds([-1.5] * 3, [1.5] * 3, 40))
    r = register_arap(s, et, RegistrationConfig(max_iters=50))
    assert r.iterations <= 50
    assert r.data_residual <= 1e-4 * et.bbox_diagonal()


def test_ellipsoid_trajectories_axial(ellipsoid_run):
    s, _, r = ellipsoid_run
    move = r.deformed.vertices - s.vertices
    # stretching along z: x and y barely move compared with z
    assert np.abs(move[:, :2]).mean() < 0.3 * np.abs(move[:, 2]).mean()
    # same direction as the axial map (x, y, 1.3 z): away from the equator
    far = np.abs(s.vertices[:, 2]) > 0.1
    assert np.all(np.sign(move[far, 2]) == np.sign(s.vertices[far, 2]))


def test_result_invariants(ellipsoid_run):
    s, _, r = ellipsoid_run
    assert r.converged and not r.diverged
    assert np.array_equal(r.deformed.faces, s.faces)
    h = np.array(r.history[-3:])
    assert np.all(np.isfinite(h))
    assert np.all(np.diff(h, axis=0) <= 1e-9)
    assert r.arap_energy == pytest.approx(arap_deformation_energy(s, r.deformed.vertices), rel=1e-9)


def test_point_to_plane_option():
    m = _asymmetric(1)
    tgt = m.with_vertices(m.vertices * [1.1, 1.0, 0.95])
    r = register_arap(m, tgt, RegistrationConfig(point_to_plane=True, max_iters=30))
    r0 = register_arap(m, m.with_vertices(m.vertices * 1.0), RegistrationConfig(point_to_plane=True))
    assert np.isfinite(r.data_residual) and r.data_residual < 1e-3
    assert r0.data_residual <= 1e-12


def test_rest_shape_must_match():
    with pytest.raises(ValueError):
        register_arap(icosphere(1), icosphere(1), rest=icosphere(2))


def test_arap_energy_zero_for_rigid_motion():
    m = _asymmetric(1)
    R = Rotation.random(random_state=3).as_matrix()
    assert arap_deformation_energy(m, m.vertices @ R.T + 1.0) <= 1e-20
    assert arap_deformation_energy(m, 1.1 * m.vertices) > 1e-4


@given(seeds)
def test_fit_rotations_backends(seed):
    S = np.random.default_rng(seed).standard_normal((50, 3, 3))
    outs = [kernels.fit_rotations(S, backend=b) for b in BACKENDS]
    for R in outs:
        assert np.abs(np.einsum("nij,nkj->nik", R, R) - np.eye(3)).max() <= 1e-12
        assert np.all(np.linalg.det(R) > 0)
    for R in outs[1:]:
        assert np.abs(R - outs[0]).max() <= 1e-8
    # maximiser of tr(R S) over SO(3)
    Q = Rotation.random(20, random_state=seed).as_matrix()
    best = np.einsum("nij,nji->n", outs[0], S)
    for q in Q:
        assert np.all(best >= np.einsum("ij,nji->n", q, S) - 1e-12)


def test_path_identity():
    m = icosphere(1)
    r = register_along_path(m, SphereGenerator(), [1.0], [1.0], grid=VoxelGrid.from_bounds([-2] * 3, [2] * 3, 8))
    assert r.deformed is m and r.iterations == 0


def test_path_radius_family():
    s = icosphere(3)
    grid = VoxelGrid.from_bounds([-1.8] * 3, [1.8] * 3, 40)
    r = register_along_path(s, SphereGenerator(), [1.0], [1.5], 10, grid)
    rad = np.linalg.norm(r.deformed.vertices, axis=1)
    assert np.abs(rad - 1.5).max() <= 0.01 * 1.5
    assert len(r.step_residuals) == 11
    assert r.data_residual <= 10 * max(r.step_residuals)
    single = register_arap(s, marching_cubes(SphereGenerator(), [1.5], grid))
    assert max(r.step_residuals) <= single.data_residual * (1 + 1e-6) + 1e-12


def test_path_empty_step_named():
    calls = []

    def extract(z):
        calls.append(z)
        if len(calls) == 3:
            raise EmptySurfaceError("nothing here")
        return icosphere(1).with_vertices(icosphere(1).vertices * z[0])

    with pytest.raises(EmptySurfaceError, match="step 3 of 5"):
        register_along_path(icosphere(1), SphereGenerator(), [1.0], [1.2], 5, extract=extract)


def test_edge_distortion_examples():
    m = _asymmetric(1)
    assert edge_distortion(m.vertices, m) == 0
    assert edge_distortion(1.3 * m.vertices, m) == pytest.approx(0.09, rel=1e-12)
    r = np.random.default_rng(0)
    jit = m.vertices + 0.001 * m.bbox_diagonal() * r.standard_normal(m.vertices.shape)
    assert edge_distortion(jit, m) < edge_distortion(1.1 * m.vertices, m)
    with pytest.raises(ValueError):
        edge_distortion(m.vertices[:-1], m)


def test_edge_distortion_skips_zero_edges():
    v = np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0]], float)
    m = TriMesh(v, [[0, 1, 2]])
    val, skipped = edge_distortion(v * 2, m, return_skipped=True)
    assert skipped == 1 and val == pytest.approx(1.0)


@given(seeds)
def test_edge_distortion_isometry_zero(seed):
    m = _asymmetric(1)
    R = Rotation.random(random_state=seed).as_matrix()
    assert edge_distortion(m.vertices @ R.T + 3.0, m) <= 1e-12
    r = np.random.default_rng(seed)
    bumped = m.vertices.copy()
    bumped[r.integers(m.n)] += 0.01
    assert edge_distortion(bumped, m) > 1e-12


def test_graph_examples():
    g = build_shape_graph([[0.0], [1.0], [3.0]], 2)
    assert g.edges == [(0, 1), (0, 2), (1, 2)]
    g = build_shape_graph([0.0, 1.0, 2.0, 10.0], 1)
    assert g.edges == [(0, 1), (1, 2), (2, 3)]
    g = build_shape_graph([[0.0], [0.0], [5.0]], 1)
    assert (0, 1) in g.edges
    assert DEFAULT_K_HUMAN == 25 and DEFAULT_K_ANIMAL == 40
    with pytest.raises(GraphError):
        build_shape_graph([[0.0]], 1)
    with pytest.raises(GraphError):
        build_shape_graph([[0.0], [1.0]], 2)


@given(seeds, st.integers(3, 12), st.integers(1, 4))
def test_graph_knn_properties(seed, n, K):
    K = min(K, n - 1)
    z = np.random.default_rng(seed).standard_normal((n, 3))
    g = build_shape_graph(z, K)
    for i in range(n):
        assert len(g.neighbors(i)) >= K
    d = np.linalg.norm(z[:, None] - z[None], axis=2)
    for i in range(n):
        nearest = [j for j in np.argsort(d[i], kind="stable") if j != i][:K]
        for j in nearest:
            assert (min(i, j), max(i, j)) in g.edges


def test_dijkstra_avoids_heavy_edge_and_breaks_ties():
    g = ShapeGraph(np.zeros((3, 1)), 2, 0, [(0, 1), (0, 2), (1, 2)], {(0, 1): 1.0, (0, 2): 10.0, (1, 2): 1.0})
    assert shortest_paths(g)[2] == [0, 1, 2]
    g = ShapeGraph(np.zeros((4, 1)), 2, 0, [(0, 1), (0, 2), (1, 3), (2, 3)],
                   {(0, 1): 1.0, (0, 2): 1.0, (1, 3): 1.0, (2, 3): 1.0})
    assert shortest_paths(g)[3] == [0, 1, 3]


def test_unreachable_nodes_listed():
    g = ShapeGraph(np.zeros((4, 1)), 1, 0, [(0, 1), (2, 3)], {(0, 1): 1.0, (2, 3): 1.0})
    with pytest.raises(GraphError) as exc:
        shortest_paths(g)
    assert exc.value.unreachable == [2, 3]


def test_graph_json_roundtrip(tmp_path):
    g = build_shape_graph(np.random.default_rng(0).standard_normal((5, 2)), 2)
    for e in g.edges:
        g.weights[e] = float(sum(e))
    shortest_paths(g)
    p = tmp_path / "g.json"
    g.save(p)
    import json
    back = ShapeGraph.from_dict(json.loads(p.read_text()))
    assert back.edges == g.edges and back.weights == g.weights and back.paths == g.paths
    assert np.array_equal(back.codes, g.codes)


@pytest.fixture(scope="module")
def chain():
    base = icosphere(2)
    shapes = [base.with_vertices(base.vertices * [1 + 0.06 * k, 1, 1 - 0.03 * k]) for k in range(6)]
    g = ShapeGraph(np.arange(6.0)[:, None], 1, 0, [(k, k + 1) for k in range(5)])
    res = register_graph_edges(g, shapes, shapes, RegistrationConfig(rigid_init=False))
    return g, shapes, res


def test_single_edge_composition_equals_registration(chain):
    g, shapes, res = chain
    sub = ShapeGraph(g.codes[:2], 1, 0, [(0, 1)], {(0, 1): g.weights[(0, 1)]})
    out = propagate_correspondences(sub, res, shapes)
    assert np.array_equal(out[1], res[(0, 1)])
    assert np.array_equal(out[0], shapes[0].vertices)


def test_chain_composed_error_bounded(chain):
    g, shapes, res = chain
    assert all(w >= 0 for w in g.weights.values())
    out = propagate_correspondences(g, res, shapes)
    per_edge = [np.linalg.norm(res[(k, k + 1)] - shapes[k + 1].vertices, axis=1).mean() for k in range(5)]
    for k in range(1, 6):
        composed = np.linalg.norm(out[k] - shapes[k].vertices, axis=1).mean()
        assert composed <= sum(per_edge[:k]) + 1e-12


def test_graph_edges_workers_identical(chain):
    g, shapes, res = chain
    g2 = ShapeGraph(g.codes, 1, 0, list(g.edges))
    res2 = register_graph_edges(g2, shapes, shapes, RegistrationConfig(rigid_init=False), workers=3)
    assert g2.weights == g.weights
    for k in res:
        assert np.array_equal(res[k], res2[k])
