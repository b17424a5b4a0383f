import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import sparse

from jointcorr import deform, induced as ind
from jointcorr.errors import DegenerateConstraintError
from jointcorr.implicit import (BumpFieldGenerator, EllipsoidGenerator, SphereGenerator,
                                TranslatedGenerator, VoxelGrid, fit_mlp, init_mlp, latent_path)
from jointcorr.marching import marching_cubes
from jointcorr.mesh import icosphere

seeds = st.integers(0, 2**31 - 1)


@pytest.fixture(scope="module")
def ellipsoid_case():
    g = EllipsoidGenerator((1.0, 0.8, 0.6))
    z = np.array([0.05, -0.1, 0.02])
    mesh = marching_cubes(g, z, VoxelGrid.from_bounds([-1.3] * 3, [1.3] * 3, 20))
    L = deform.build_combined(mesh)
    cs = ind.build_constraints(g, mesh, z)
    return g, z, mesh, L, cs


@pytest.fixture(scope="module")
def translation_case():
    base = EllipsoidGenerator((1.0, 0.7, 0.5))
    g = TranslatedGenerator(base, [0, 0, 0], [[1, 0, 0], [0, 1, 0], [0, 0.3, 1]])
    z = np.array([0.1, -0.2, 0.05])
    mesh = marching_cubes(g, z, VoxelGrid.from_bounds([-1.4] * 3, [1.4] * 3, 22))
    return g, z, mesh


def _bump_instance(seed, level=2):
    r = np.random.default_rng(seed)
    g = BumpFieldGenerator(8, basis="gaussian")
    z = 0.15 * r.standard_normal(8)
    base = icosphere(level)
    mesh = base.with_vertices(base.vertices * g.radius(base.vertices, z)[:, None])
    return g, z, mesh


def test_sphere_constraint_rows():
    g = SphereGenerator(2, weights=[1.0, 0.0])
    mesh = icosphere(1)
    cs = ind.build_constraints(g, mesh, [1.0, 0.0])
    C = cs.C.toarray().reshape(mesh.n, mesh.n, 3)
    assert np.allclose(C[np.arange(mesh.n), np.arange(mesh.n)], mesh.vertices, atol=1e-15)
    assert np.array_equal(cs.F, np.tile([-1.0, 0.0], (mesh.n, 1)))


def test_translation_constraint_rows(translation_case):
    g, z, mesh = translation_case
    cs = ind.build_constraints(g, mesh, z)
    gx = g.base.grad_x(mesh.vertices - g.shift(z), g.base_code)
    assert np.allclose(cs.F, -gx @ g.directions.T, atol=1e-14)


def test_degenerate_vertices_dropped():
    g = SphereGenerator()
    mesh = icosphere(1)
    moved = mesh.with_vertices(np.vstack([[0.0, 0.0, 0.0], mesh.vertices[1:]]))
    cs = ind.build_constraints(g, moved, [1.0])
    assert cs.dropped == (0,) and cs.C.shape[0] == mesh.n - 1
    with pytest.raises(DegenerateConstraintError):
        ind.build_constraints(g, mesh.with_vertices(np.zeros((mesh.n, 3))), [1.0])


def test_zero_direction_gives_zero(ellipsoid_case):
    _, _, _, L, cs = ellipsoid_case
    f = ind.solve_displacement(L, cs, np.zeros(3))
    assert np.all(f.d == 0)


def test_solver_error_cases(ellipsoid_case):
    _, _, _, L, cs = ellipsoid_case
    with pytest.raises(ValueError):
        ind.solve_displacement(L, cs, [1, 0, 0], epsilon=0)
    with pytest.raises(ValueError):
        ind.solve_displacement(L, cs, [1, 0])
    with pytest.raises(ValueError):
        ind.solve_displacement(L, cs, [np.nan, 0, 0])


@given(seeds)
def test_kkt_bounds_and_constraints(seed):
    g, z, mesh = _bump_instance(seed % 1000, level=2)
    L = deform.build_combined(mesh)
    cs = ind.build_constraints(g, mesh, z)
    v = np.random.default_rng(seed).standard_normal(8)
    eps = 1e-3
    f = ind.solve_displacement(L, cs, v, eps)
    dg = f.diagnostics
    assert dg["kkt_residual"] <= 1e-6 * dg["kkt_scale"]
    assert np.abs(cs.C @ f.d + eps * cs.F @ v).max() <= 1e-6 * eps * np.linalg.norm(v)


def _tangent_probe(cs, n, rng):
    # random field with zero normal component at every constrained vertex
    w = rng.standard_normal((n, 3))
    rows = cs.rows
    gx = cs.C[np.arange(rows.size)].toarray().reshape(rows.size, n, 3)[np.arange(rows.size), rows]
    w[rows] -= (np.einsum("ij,ij->i", w[rows], gx) / np.einsum("ij,ij->i", gx, gx))[:, None] * gx
    return w.ravel()


def test_feasible_perturbations_do_not_improve(ellipsoid_case):
    _, _, mesh, L, cs = ellipsoid_case
    rng = np.random.default_rng(0)
    v = rng.standard_normal(3)
    s = ind.KKTSolver(L, cs, refine=0)
    d = ind.solve_displacement(L, cs, v, 1e-3, solver=s).d
    A = L.matrix + s.mu * sparse.eye(L.matrix.shape[0])
    obj = lambda x: float(x @ (A @ x))
    base = obj(d)
    for _ in range(20):
        w = _tangent_probe(cs, mesh.n, rng)
        assert np.abs(cs.C @ w).max() <= 1e-12
        for t in (1e-2, 1e-5):
            step = t * np.linalg.norm(d) * w / np.linalg.norm(w)
            assert base <= obj(d + step) + 1e-9


@given(seeds)
def test_linearity_in_v_and_epsilon(seed):
    g, z, mesh = _bump_instance(seed % 50, level=1)
    L = deform.build_combined(mesh)
    cs = ind.build_constraints(g, mesh, z)
    s = ind.KKTSolver(L, cs)
    r = np.random.default_rng(seed)
    v1, v2 = r.standard_normal(8), r.standard_normal(8)
    a, b = r.standard_normal(2)
    d = lambda v, e=1e-3: ind.solve_displacement(L, cs, v, e, solver=s).d
    lhs = d(a * v1 + b * v2)
    rhs = a * d(v1) + b * d(v2)
    assert np.abs(lhs - rhs).max() <= 1e-8 * np.abs(lhs).max()
    assert np.abs(d(v1, 2e-3) - 2 * d(v1)).max() <= 1e-8 * np.abs(d(v1)).max()


def test_transfer_operator_consistency(ellipsoid_case):
    _, _, _, L, cs = ellipsoid_case
    op = ind.transfer_operator(L, cs)
    rng = np.random.default_rng(1)
    for _ in range(5):
        v = rng.standard_normal(3)
        d = ind.solve_displacement(L, cs, v, 1e-3).d
        assert np.abs(op.displacement(v, 1e-3) - d).max() <= 1e-8 * np.abs(d).max()


def _dense_min_energy(A, C, F):
    # minimum-norm minimiser of d^T A d subject to C d = F
    u, sv, vt = np.linalg.svd(C)
    rank = int((sv > 1e-12 * sv[0]).sum())
    N = vt[rank:].T
    dp = np.linalg.pinv(C) @ F
    y = -np.linalg.pinv(N.T @ A @ N, rcond=1e-10, hermitian=True) @ (N.T @ A @ dp)
    return dp + N @ y


def test_transfer_operator_matches_dense_oracle():
    g, z, mesh = _bump_instance(3, level=1)
    L = deform.build_combined(mesh)
    cs = ind.build_constraints(g, mesh, z)
    A = L.matrix.toarray()
    ref = _dense_min_energy(A, cs.C.toarray(), cs.F)
    G = ind.transfer_operator(L, cs).G
    assert np.abs(G - ref).max() <= 1e-6 * np.abs(ref).max()
    E = ind.gram_energy(L, G)
    assert np.abs(E - ref.T @ A @ ref).max() <= 1e-6 * np.abs(E).max()


def test_energy_not_above_range_restricted_formula():
    # L^+ C^T (C L^+ C^T)^+ F is feasible but cannot use the null space of L
    g, z, mesh = _bump_instance(4, level=1)
    L = deform.build_combined(mesh)
    cs = ind.build_constraints(g, mesh, z)
    A = L.matrix.toarray()
    Lp = np.linalg.pinv(A, rcond=1e-10, hermitian=True)
    C = cs.C.toarray()
    M = np.linalg.pinv(C @ Lp @ C.T)
    closed = np.trace(cs.F.T @ M @ cs.F)
    tr, _ = ind.trace_energy(L, cs, trace_mode="exact")
    assert tr <= closed * (1 + 1e-9)


def test_mu_stability(ellipsoid_case):
    _, _, _, L, cs = ellipsoid_case
    mu = ind.default_mu(L)
    v = np.array([1.0, -0.5, 0.3])
    a = ind.solve_displacement(L, cs, v, mu=mu).d
    b = ind.solve_displacement(L, cs, v, mu=mu / 10).d
    assert np.abs(a - b).max() <= 1e-6 * np.abs(a).max()


def test_translation_family_is_uniform_translation(translation_case):
    g, z, mesh = translation_case
    L = deform.build_combined(mesh)
    cs = ind.build_constraints(g, mesh, z)
    G = ind.transfer_operator(L, cs).G.reshape(mesh.n, 3, 3)
    assert np.abs(G - G[0]).max() <= 1e-6
    assert np.allclose(G[0], -g.directions.T, atol=1e-6)
    assert 0 <= ind.r_geo(L, cs) <= 1e-10


def test_sphere_radial_field_at_alpha_zero():
    g = SphereGenerator()
    mesh = icosphere(3)
    L = deform.build_combined(mesh, 0.0)
    cs = ind.build_constraints(g, mesh, [1.0])
    d = ind.solve_displacement(L, cs, [1.0], 1e-3).displacements
    assert np.abs(d - 1e-3 * mesh.vertices).max() <= 0.02 * 1e-3
    assert ind.r_geo(L, cs) <= 1e-8


def test_sphere_normal_component_exact_at_default_alpha():
    g = SphereGenerator()
    mesh = icosphere(2)
    L = deform.build_combined(mesh)
    cs = ind.build_constraints(g, mesh, [1.0])
    d = ind.solve_displacement(L, cs, [1.0], 1e-3).displacements
    radial = np.einsum("ij,ij->i", d, mesh.vertices)
    assert np.abs(radial - 1e-3).max() <= 1e-9


def test_r_geo_nonnegative_and_ball_constant(ellipsoid_case):
    _, _, _, L, cs = ellipsoid_case
    tr, info = ind.trace_energy(L, cs)
    assert info["trace_mode"] == "exact" and tr >= 0
    assert ind.r_geo(L, cs) == pytest.approx(ind.ball_volume(3) / 3 * tr, rel=1e-14)
    assert ind.ball_volume(2) == pytest.approx(np.pi)
    assert ind.ball_volume(3) == pytest.approx(4 * np.pi / 3)


def test_trace_mode_parsing():
    assert ind.parse_trace_mode("exact") == ("exact", 0)
    assert ind.parse_trace_mode("hutchinson:16") == ("hutchinson", 16)
    assert ind.parse_trace_mode("auto") == ("auto", 64)
    for bad in ("hutchinson:0", "nope"):
        with pytest.raises(ValueError):
            ind.parse_trace_mode(bad)


def test_hutchinson_is_unbiased_in_expectation():
    g, z, mesh = _bump_instance(11, level=1)
    L = deform.build_combined(mesh)
    cs = ind.build_constraints(g, mesh, z)
    exact, _ = ind.trace_energy(L, cs, trace_mode="exact")
    est, info = ind.trace_energy(L, cs, trace_mode="hutchinson:4000", rng=np.random.default_rng(0))
    assert abs(est - exact) <= 4 * info["stderr"]


def test_scale_covariance():
    s = 2.5
    g1 = EllipsoidGenerator((1.0, 0.8, 0.6))
    gs = EllipsoidGenerator((s, 0.8 * s, 0.6 * s))
    z = np.zeros(3)
    mesh = marching_cubes(g1, z, VoxelGrid.from_bounds([-1.3] * 3, [1.3] * 3, 16))
    big = mesh.with_vertices(s * mesh.vertices)
    v = np.array([0.3, -1.0, 0.5])
    d1 = ind.solve_displacement(deform.build_combined(mesh), ind.build_constraints(g1, mesh, z), v).d
    ds = ind.solve_displacement(deform.build_combined(big), ind.build_constraints(gs, big, z), v).d
    assert np.abs(ds - s * d1).max() <= 1e-8 * np.abs(ds).max()


def test_cycle_residual_translation_family(translation_case):
    g, z, mesh = translation_case
    G = ind.transfer_at(g, mesh, z)[0].G
    for i in range(3):
        assert ind.cycle_residual(g, z, i, 1e-2, mesh=mesh) <= 1e-6 * np.sum(G ** 2)


def test_cycle_residual_ellipsoid_richardson(ellipsoid_case):
    g, z, mesh, _, _ = ellipsoid_case
    r = [ind.cycle_residual(g, z, 0, e, mesh=mesh) for e in (2e-2, 1e-2, 5e-3)]
    assert all(x > 0 for x in r)
    assert r[0] > r[1] > r[2]
    # residual / eps_cyc^2 tends to the squared directional derivative norm
    lim = [x / e ** 2 for x, e in zip(r, (2e-2, 1e-2, 5e-3))]
    assert abs(lim[2] - lim[1]) < abs(lim[1] - lim[0])


def test_cycle_residual_errors(ellipsoid_case):
    g, z, mesh, _, _ = ellipsoid_case
    with pytest.raises(ValueError):
        ind.cycle_residual(g, z, 0, 0.0, mesh=mesh)
    with pytest.raises(IndexError):
        ind.cycle_residual(g, z, 3, 1e-2, mesh=mesh)
    with pytest.raises(ValueError):
        ind.cycle_residual(g, z, 0)


def test_three_cycle_is_second_order(ellipsoid_case):
    g, z, mesh, _, _ = ellipsoid_case
    rng = np.random.default_rng(1)
    v, v2 = rng.standard_normal(3), rng.standard_normal(3)
    r1 = ind.three_cycle_residual(g, mesh, z, v, v2, 2e-3)
    r2 = ind.three_cycle_residual(g, mesh, z, v, v2, 4e-3)
    assert 0.8 * 4 <= r2 / r1 <= 1.2 * 4


def test_advect_identity_and_sphere_growth():
    g = SphereGenerator()
    mesh = icosphere(2)
    same, z1 = ind.advect(g, mesh, [1.0], [0.0])
    assert same is mesh and np.array_equal(z1, [1.0])
    m, z = mesh, np.array([1.0])
    for _ in range(10):
        m, z = ind.advect(g, m, z, [1.0], 1e-3)
    assert np.abs(np.linalg.norm(m.vertices, axis=1) - 1.01).max() <= 1e-4
    assert z[0] == pytest.approx(1.01)


def test_advect_between_stays_on_level_set():
    g = EllipsoidGenerator((1.0, 0.8, 0.6))
    z0, z1 = np.zeros(3), np.array([0.1, -0.05, 0.08])
    mesh = marching_cubes(g, z0, VoxelGrid.from_bounds([-1.3] * 3, [1.3] * 3, 18))
    out = ind.advect_between(g, mesh, z0, z1, step=0.02)
    assert np.abs(g.value(out.vertices, z1)).max() <= 5e-3
    assert np.array_equal(out.faces, mesh.faces)


def test_fitted_mlp_constraint_residual():
    r = np.random.default_rng(0)
    gen = init_mlp([32, 32], 1, r, init_radius=1.0)
    x = r.uniform(-1.6, 1.6, (3000, 3))
    zc = r.uniform(0.9, 1.1, (3000, 1))
    fit_mlp(gen, x, zc, np.linalg.norm(x, axis=1) - zc[:, 0], steps=600, lr=3e-3, batch=512, rng=r)
    mesh = marching_cubes(gen, [1.0], VoxelGrid.from_bounds([-1.5] * 3, [1.5] * 3, 20))
    cs = ind.build_constraints(gen, mesh, [1.0])
    eps = 1e-3
    n = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    d_true = (eps * n).ravel()
    assert np.abs(cs.C @ d_true + eps * cs.F @ [1.0]).max() <= 1e-3
