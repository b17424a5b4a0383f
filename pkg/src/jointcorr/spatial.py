"""Exact nearest-neighbour queries, Chamfer distance and edge-graph geodesics."""
from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from . import kernels
from ._fallback import closest_point_on_triangles  # noqa: F401
from .mesh import TriMesh


class PointIndex:
    """k-d tree over a fixed point set; ties resolve to the lowest index."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise ValueError("empty point set")
        self.points = pts
        self._tree = cKDTree(pts)

    def query(self, queries):
        """Return (indices, squared distances) for an (m, 3) array of queries."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(4, self.points.shape[0])
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        # exact squared distances for the candidates
        d2 = np.einsum("mkj,mkj->mk", self.points[idx] - q[:, None, :], self.points[idx] - q[:, None, :])
        best = d2.min(axis=1)
        tied = d2 == best[:, None]
        cand = np.where(tied, idx, np.iinfo(np.int64).max)
        out = cand.min(axis=1)
        # every candidate tied: more equidistant points may exist beyond k
        full = tied.all(axis=1)
        for m in np.nonzero(full)[0]:
            r = np.sqrt(best[m])
            near = np.asarray(self._tree.query_ball_point(q[m], r * (1 + 1e-12) + 1e-300), dtype=np.int64)
            dd = np.einsum("kj,kj->k", self.points[near] - q[m], self.points[near] - q[m])
            out[m] = near[dd == dd.min()].min()
            best[m] = dd.min()
        return out.astype(np.int64), best


def nearest_point_index(points, query):
    """Index of the nearest point to a single 3D query and its squared distance."""
    idx, d2 = PointIndex(points).query(np.asarray(query, dtype=np.float64)[None, :])
    return int(idx[0]), float(d2[0])


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance with squared point distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer needs non-empty point sets")
    dab, _ = cKDTree(b).query(a)
    dba, _ = cKDTree(a).query(b)
    return float(np.mean(dab ** 2) + np.mean(dba ** 2))


def edge_graph(mesh: TriMesh) -> sparse.csr_matrix:
    e = mesh.edges
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    g = sparse.csr_matrix((np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]),
                                                    np.concatenate([e[:, 1], e[:, 0]]))),
                          shape=(mesh.n, mesh.n))
    return g


def geodesic_distances(mesh: TriMesh, sources) -> np.ndarray:
    """Dijkstra distance over the Euclidean-weighted edge graph to the nearest source.

    Unreachable vertices get ``inf``.
    """
    src = np.unique(np.atleast_1d(np.asarray(sources, dtype=np.int64)))
    if src.size == 0:
        raise ValueError("empty source set")
    if src.min() < 0 or src.max() >= mesh.n:
        raise IndexError("source vertex out of range")
    return dijkstra(edge_graph(mesh), directed=False, indices=src, min_only=True)


def pairwise_geodesics(mesh: TriMesh, sources) -> np.ndarray:
    """Rows: distances from each source vertex to every vertex."""
    src = np.asarray(sources, dtype=np.int64)
    return dijkstra(edge_graph(mesh), directed=False, indices=src)


class SurfaceIndex:
    """Closest points on a triangle mesh.

    Candidate faces are those incident to the ``k`` nearest vertices, which
    finds the true closest face on reasonably shaped meshes.
    """

    def __init__(self, mesh: TriMesh, k: int = 8, backend=None):
        self.mesh = mesh
        self.backend = backend
        self.vertex_index = PointIndex(mesh.vertices)
        self.points = self.vertex_index.points
        self.k = min(k, mesh.n)
        f = mesh.faces
        inc = sparse.csr_matrix((np.ones(f.size), (f.ravel(), np.repeat(np.arange(f.shape[0]), 3))),
                                shape=(mesh.n, f.shape[0]))
        self._inc_ptr = inc.indptr.astype(np.int64)
        self._inc_idx = inc.indices.astype(np.int64)

    def query(self, queries):
        """Return (closest points, face indices, squared distances)."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        m = q.shape[0]
        _, vidx = self.vertex_index._tree.query(q, k=self.k)
        vidx = np.asarray(vidx, dtype=np.int64).reshape(q.shape[0], -1)
        return kernels.closest_on_mesh(q, vidx, self._inc_ptr, self._inc_idx,
                                       self.mesh.vertices, self.mesh.faces, backend=self.backend)
