import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.sparse.csgraph import dijkstra

from jointcorr.implicit import evaluate
from jointcorr.mesh import TriMesh, icosphere, one_ring
from jointcorr.meshio import read_ply
from jointcorr.metrics import (DEFAULT_VMAX, N_BINS, colormap, decode_colors, eval_correspondences,
                               export_error_field, geodesic_errors, palette)
from jointcorr.spatial import edge_graph
from jointcorr.synth import FAMILIES, load_collection, synth_collection


def unit_lattice(rows=6, cols=7):
    """Flat equilateral triangle lattice with unit edges."""
    pts = [[c + 0.5 * (r % 2), r * np.sqrt(3) / 2, 0.0] for r in range(rows) for c in range(cols)]
    faces = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            a, b = r * cols + c, r * cols + c + 1
            u, v = (r + 1) * cols + c, (r + 1) * cols + c + 1
            if r % 2 == 0:
                faces += [[a, b, u], [b, v, u]]
            else:
                faces += [[a, b, v], [a, v, u]]
    return TriMesh(np.array(pts), np.array(faces))


# synth

@pytest.mark.parametrize("family", FAMILIES)
def test_identical_parameters_give_identical_meshes(family):
    p = {"sphere-radius": [1.2, 1.2], "ellipsoid-axes": [[1, 1.1, 0.9]] * 2,
         "bent-capsule": [[1.0, 0.3]] * 2, "bump-field": [np.full(8, 0.1)] * 2}[family]
    c = synth_collection(family, 2, 0, params=p, template_level=2)
    assert np.array_equal(c.meshes[0].vertices, c.meshes[1].vertices)
    err = eval_correspondences([np.arange(c.meshes[0].n)], [np.arange(c.meshes[0].n)], [c.meshes[1]])
    assert err.mean == 0 and err.median == 0


def test_sphere_radius_family_is_radial_scaling():
    c = synth_collection("sphere-radius", 10, 0, template_level=2)
    radii = np.linspace(1.0, 1.5, 10)
    assert np.allclose(c.codes.ravel(), radii)
    base = c.meshes[0].vertices
    for r, m in zip(radii, c.meshes):
        assert np.allclose(m.vertices, r * base, atol=1e-14)


@pytest.mark.parametrize("family", FAMILIES)
def test_shapes_lie_on_generator_level_set(family):
    c = synth_collection(family, 4, 11, template_level=2)
    for z, m in zip(c.codes, c.meshes):
        assert np.max(np.abs(evaluate(c.generator, m.vertices, z))) <= 1e-9


def test_bent_capsule_seed_7_bit_exact():
    a = synth_collection("bent-capsule", 10, 7)
    b = synth_collection("bent-capsule", 10, 7)
    assert np.array_equal(a.codes, b.codes)
    for x, y in zip(a.meshes, b.meshes):
        assert np.array_equal(x.vertices, y.vertices) and np.array_equal(x.faces, y.faces)
    c = synth_collection("bent-capsule", 10, 8)
    assert not np.array_equal(a.codes, c.codes)


def test_synth_errors():
    with pytest.raises(ValueError, match="unknown family"):
        synth_collection("teapot", 3, 0)
    with pytest.raises(ValueError):
        synth_collection("sphere-radius", 1, 0)
    with pytest.raises(ValueError):
        synth_collection("bent-capsule", 2, 0, params=[[5.0, 0.3], [0.0, 0.3]])


def test_collection_save_load_round_trip(tmp_path):
    c = synth_collection("ellipsoid-axes", 3, 4, template_level=2)
    man = c.save(tmp_path)
    d = load_collection(man)
    assert d.family == c.family and d.seed == 4
    assert np.array_equal(d.codes, c.codes)
    for x, y in zip(c.meshes, d.meshes):
        assert np.array_equal(x.vertices, y.vertices)
    assert (tmp_path / "shape_001.gt.corr").exists()


# metrics

def test_perfect_prediction_zero_error():
    m = icosphere(2)
    idx = np.arange(m.n)
    r = eval_correspondences([idx, idx], [idx, idx], [m, m])
    assert r.mean == 0 and r.median == 0
    assert all(np.all(e >= 0) for e in r.per_vertex)


def test_one_hop_offset_unit_edges():
    m = unit_lattice()
    lengths = np.linalg.norm(np.diff(m.vertices[m.edges], axis=1)[:, 0], axis=1)
    assert np.allclose(lengths, 1.0)
    nb = np.array([min(one_ring(m, i)) for i in range(m.n)])
    r = eval_correspondences([nb], [np.arange(m.n)], [m])
    assert r.mean == pytest.approx(1.0, abs=1e-12)


def test_random_prediction_matches_expected_distance():
    m = icosphere(2)
    full = dijkstra(edge_graph(m), directed=False)
    expected = full.mean()
    rng = np.random.default_rng(0)
    gt = np.tile(np.arange(m.n), 20)
    pred = rng.integers(0, m.n, gt.size)
    err = eval_correspondences([pred], [gt], [m]).mean
    assert abs(err - expected) <= 0.1 * expected


@given(st.floats(0.1, 10.0), st.integers(0, 1000))
def test_scale_symmetry(s, seed):
    m = icosphere(1)
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, m.n, m.n), rng.integers(0, m.n, m.n)
    base = eval_correspondences([pred], [gt], [m])
    big = eval_correspondences([pred], [gt], [m.with_vertices(s * m.vertices)])
    assert big.mean == pytest.approx(s * base.mean, rel=1e-12)
    assert big.median == pytest.approx(s * base.median, rel=1e-12)


def test_points_snap_to_vertices():
    m = icosphere(2)
    pts = m.vertices * 1.001
    assert np.all(geodesic_errors(pts, np.arange(m.n), m) == 0)


def test_coverage_mismatch():
    m = icosphere(1)
    with pytest.raises(ValueError):
        geodesic_errors(np.arange(5), np.arange(6), m)
    with pytest.raises(ValueError):
        eval_correspondences([np.arange(m.n)], [], [m])


def test_colormap_extremes():
    c = colormap(np.zeros(10))
    assert np.all(c == palette()[0])
    sat = colormap([DEFAULT_VMAX, 2 * DEFAULT_VMAX, 1e9])
    assert np.all(sat == palette()[-1])


@given(st.lists(st.floats(0.0, 0.3), min_size=1, max_size=50))
def test_colormap_round_trip(values):
    v = np.array(values)
    back = decode_colors(colormap(v))
    assert np.all(np.abs(back - np.minimum(v, DEFAULT_VMAX)) <= 0.5 * DEFAULT_VMAX / (N_BINS - 1) + 1e-12)


def test_palette_entries_distinct():
    assert len({tuple(c) for c in palette()}) == N_BINS


def test_export_error_field(tmp_path):
    m = icosphere(2)
    e = np.linspace(0, 0.2, m.n)
    p = tmp_path / "err.ply"
    export_error_field(e, m, p)
    v = read_ply(p)["vertex"]
    rgb = np.stack([v["red"], v["green"], v["blue"]], axis=1)
    assert np.array_equal(rgb, colormap(e))
    with pytest.raises(ValueError):
        export_error_field(e[:-1], m, p)
    with pytest.raises(ValueError):
        export_error_field(-e, m, p)
