"""ARAP / ACAP deformation energies as sparse quadratic forms.

For a displacement field ``d`` (length 3n, vertex-major) on a mesh with
vertices ``g`` the per-vertex energies are

    ARAP:  min_c      sum_j || c x e_ij - (d_i - d_j) ||^2
    ACAP:  min_{s,c}  sum_j || s e_ij + c x e_ij - (d_i - d_j) ||^2

with ``e_ij = g_i - g_j``.  Eliminating the per-vertex unknowns in closed
form leaves ``d^T M d`` with

    M = 2 (L kron I3) - sum_i A_i^T H_i^{-1} A_i

where ``L`` is the graph Laplacian, ``H_i`` the normal matrix of vertex
i and ``A_i`` maps ``d`` to the right-hand side of its normal equations.
The brute-force oracles below minimise the per-vertex problems directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.io import mmwrite

from . import kernels
from .mesh import TriMesh

ARAP = "arap"
ACAP = "acap"
COMBINED = "combined"
DEFAULT_ALPHA = 10.0
DEGENERATE_RTOL = 1e-9


def _cross_matrix(e):
    """Stack of skew matrices [e]x with [e]x y = e x y."""
    z = np.zeros(e.shape[0])
    return np.stack([
        np.stack([z, -e[:, 2], e[:, 1]], axis=1),
        np.stack([e[:, 2], z, -e[:, 0]], axis=1),
        np.stack([-e[:, 1], e[:, 0], z], axis=1),
    ], axis=1)


def _graph(mesh, edges=None):
    """Vertices plus CSR (indptr, indices) of the undirected edge graph."""
    v = np.asarray(mesh.vertices if isinstance(mesh, TriMesh) else mesh, dtype=np.float64).reshape(-1, 3)
    n = v.shape[0]
    if edges is None:
        if not isinstance(mesh, TriMesh):
            raise TypeError("edges are required when passing raw vertices")
        adj = mesh.adjacency
    else:
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        a = sparse.csr_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                              shape=(n, n))
        a.sum_duplicates()
        a.sort_indices()
        a.data[:] = 1.0
        adj = a
    return v, adj.indptr.astype(np.int64), adj.indices.astype(np.int64)


def _edge_blocks(v, indptr, indices, kind):
    """Per directed edge, M^T (r x 3) where the residual is M u - delta."""
    n = v.shape[0]
    src = np.repeat(np.arange(n), np.diff(indptr))
    e = v[src] - v[indices]
    cx = _cross_matrix(e)
    # c x e = -[e]x c, so M = -[e]x and M^T = [e]x
    if kind == ARAP:
        return cx, src
    if kind == ACAP:
        return np.concatenate([e[:, None, :], cx], axis=1), src
    raise ValueError(f"unknown kind {kind!r}")


@dataclass(frozen=True)
class DeformQuadForm:
    """Sparse symmetric PSD matrix of size 3n x 3n and its provenance."""

    matrix: sparse.csr_matrix
    kind: str
    alpha: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.matrix.shape[0] // 3

    def energy(self, d) -> float:
        d = np.asarray(d, dtype=np.float64).ravel()
        return float(d @ (self.matrix @ d))

    def save_mtx(self, path):
        """Write the matrix in Matrix Market coordinate format."""
        mmwrite(str(path), sparse.coo_matrix(self.matrix), symmetry="general")


def _assemble(mesh, kind, edges=None, backend=None):
    v, indptr, indices = _graph(mesh, edges)
    n = v.shape[0]
    P, src = _edge_blocks(v, indptr, indices, kind)
    r = P.shape[1]
    H = np.zeros((n, r, r))
    np.add.at(H, src, P @ np.transpose(P, (0, 2, 1)))
    tr = np.trace(H, axis1=1, axis2=2)
    isolated = np.nonzero(tr == 0)[0]
    active = tr > 0
    lam_min = np.full(n, np.inf)
    if active.any():
        lam_min[active] = np.linalg.eigvalsh(H[active])[:, 0]
    degenerate = active & (lam_min <= DEGENERATE_RTOL * tr)
    Hr = H.copy()
    Hr[degenerate] += (DEGENERATE_RTOL * tr[degenerate])[:, None, None] * np.eye(r)
    Hinv = np.zeros_like(H)
    if active.any():
        Hinv[active] = np.linalg.inv(Hr[active])
    rows, cols, vals = kernels.deform_scatter(indptr, indices, P, Hinv, backend=backend)
    elim = sparse.csr_matrix((vals, (rows, cols)), shape=(3 * n, 3 * n))
    deg = np.diff(indptr).astype(np.float64)
    adj = sparse.csr_matrix((np.ones(indices.size), indices, indptr), shape=(n, n))
    lap = sparse.diags(deg) - adj
    m = 2.0 * sparse.kron(lap, sparse.eye(3), format="csr") - elim
    m = 0.5 * (m + m.T)
    m = sparse.csr_matrix(m)
    m.sum_duplicates()
    m.sort_indices()
    diag = {"isolated_vertices": isolated.tolist(),
            "regularized_vertices": np.nonzero(degenerate)[0].tolist()}
    return m, diag


def build_arap(mesh, edges=None, backend=None) -> DeformQuadForm:
    """ARAP quadratic form on the mesh's 1-ring graph."""
    m, diag = _assemble(mesh, ARAP, edges, backend)
    return DeformQuadForm(m, ARAP, 0.0, diag)


def build_acap(mesh, edges=None, backend=None) -> DeformQuadForm:
    """ACAP quadratic form (rotation plus uniform scale per vertex)."""
    m, diag = _assemble(mesh, ACAP, edges, backend)
    return DeformQuadForm(m, ACAP, 0.0, diag)


def build_combined(mesh, alpha: float = DEFAULT_ALPHA, edges=None, backend=None) -> DeformQuadForm:
    """``alpha * ARAP + ACAP``."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    a = build_arap(mesh, edges, backend)
    c = build_acap(mesh, edges, backend)
    m = sparse.csr_matrix(alpha * a.matrix + c.matrix)
    m.sort_indices()
    diag = {"isolated_vertices": a.diagnostics["isolated_vertices"],
            "regularized_vertices": sorted(set(a.diagnostics["regularized_vertices"])
                                           | set(c.diagnostics["regularized_vertices"]))}
    return DeformQuadForm(m, COMBINED, float(alpha), diag)


def build_form(mesh, kind: str, alpha: float = DEFAULT_ALPHA, edges=None) -> DeformQuadForm:
    if kind == ARAP:
        return build_arap(mesh, edges)
    if kind == ACAP:
        return build_acap(mesh, edges)
    if kind == COMBINED:
        return build_combined(mesh, alpha, edges)
    raise ValueError(f"unknown kind {kind!r}")


def _oracle(mesh, d, edges, kind):
    v, indptr, indices = _graph(mesh, edges)
    n = v.shape[0]
    d = np.asarray(d, dtype=np.float64).reshape(n, 3)
    total = 0.0
    for i in range(n):
        nb = indices[indptr[i]:indptr[i + 1]]
        if nb.size == 0:
            continue
        rows = []
        for j in nb:
            e = v[i] - v[j]
            # columns: c (3) for ARAP; s then c for ACAP
            m = -np.array([[0.0, -e[2], e[1]], [e[2], 0.0, -e[0]], [-e[1], e[0], 0.0]])
            if kind == ACAP:
                m = np.column_stack([e, m])
            rows.append(m)
        a = np.vstack(rows)
        rhs = np.concatenate([d[i] - d[j] for j in nb])
        u = np.linalg.pinv(a) @ rhs
        res = a @ u - rhs
        total += float(res @ res)
    return total


def arap_energy_oracle(mesh, d, edges=None) -> float:
    """Sum over vertices of the minimised ARAP residual (per-vertex least squares)."""
    return _oracle(mesh, d, edges, ARAP)


def acap_energy_oracle(mesh, d, edges=None) -> float:
    """Sum over vertices of the minimised ACAP residual."""
    return _oracle(mesh, d, edges, ACAP)


def translation_field(n, t):
    return np.tile(np.asarray(t, dtype=np.float64), n)


def rigid_field(vertices, c, t=(0.0, 0.0, 0.0)):
    v = np.asarray(vertices, dtype=np.float64)
    return (np.cross(np.asarray(c, dtype=np.float64), v) + np.asarray(t, dtype=np.float64)).ravel()


def similarity_field(vertices, s, c=(0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0)):
    v = np.asarray(vertices, dtype=np.float64)
    return (s * v + np.cross(np.asarray(c, dtype=np.float64), v) + np.asarray(t, dtype=np.float64)).ravel()
