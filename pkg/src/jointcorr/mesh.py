"""Indexed triangle meshes and their combinatorial operators."""
from __future__ import annotations

from functools import cached_property

import numpy as np
from scipy import sparse

from .errors import MeshIndexError


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class TriMesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (n, 3)
        Vertex positions.
    faces : array_like, shape (m, 3)
        Vertex indices per triangle (0-based).

    Faces with repeated indices are rejected, as are out-of-range indices.
    Non-manifold connectivity is accepted; only 1-rings are ever needed.
    """

    def __init__(self, vertices, faces):
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        n = v.shape[0]
        if f.size:
            lo, hi = f.min(), f.max()
            if lo < 0 or hi >= n:
                bad = int(lo if lo < 0 else hi)
                raise MeshIndexError(f"face index {bad} out of range [0, {n})")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face with repeated vertex index")
        self.vertices = _frozen(v)
        self.faces = _frozen(f)

    @property
    def n(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def __repr__(self):
        return f"TriMesh(n={self.n}, faces={self.n_faces})"

    def with_vertices(self, vertices) -> "TriMesh":
        """Same connectivity, new positions."""
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        if v.shape[0] != self.n:
            raise ValueError(f"expected {self.n} vertices, got {v.shape[0]}")
        out = TriMesh.__new__(TriMesh)
        out.vertices = _frozen(v)
        out.faces = self.faces
        # connectivity caches are position independent
        for key in ("edges", "adjacency"):
            if key in self.__dict__:
                out.__dict__[key] = self.__dict__[key]
        return out

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (i, j) pairs with i < j."""
        f = self.faces
        if f.size == 0:
            return _frozen(np.zeros((0, 2), dtype=np.int64))
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return _frozen(np.unique(e, axis=0))

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric 0/1 vertex adjacency in CSR form with sorted indices."""
        e = self.edges
        n = self.n
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        a = sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        a.sum_duplicates()
        a.sort_indices()
        a.data[:] = 1.0
        return a

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    def valence(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def face_normals(self, normalize=True) -> np.ndarray:
        v, f = self.vertices, self.faces
        nrm = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalize:
            ln = np.linalg.norm(nrm, axis=1, keepdims=True)
            nrm = nrm / np.where(ln > 0, ln, 1.0)
        return nrm

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def signed_volume(self) -> float:
        v, f = self.vertices, self.faces
        return float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)

    def bbox_diagonal(self) -> float:
        if self.n == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def boundary_edges(self) -> np.ndarray:
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts == 1]

    def vertex_normals(self) -> np.ndarray:
        fn = self.face_normals(normalize=False)
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        ln = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.where(ln > 0, ln, 1.0)

    def sample_surface(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform samples on the triangles."""
        areas = self.face_areas()
        idx = rng.choice(self.n_faces, size=count, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(count))
        r2 = rng.random(count)
        v = self.vertices[self.faces[idx]]
        return ((1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1]
                + (r1 * r2)[:, None] * v[:, 2])

    def compact(self) -> "TriMesh":
        """Drop vertices not referenced by any face (order preserved)."""
        used = np.zeros(self.n, dtype=bool)
        used[self.faces.ravel()] = True
        remap = -np.ones(self.n, dtype=np.int64)
        remap[used] = np.arange(used.sum())
        return TriMesh(self.vertices[used], remap[self.faces])


def one_ring(mesh: TriMesh, i: int) -> set[int]:
    """Indices of vertices sharing an edge with ``i``."""
    if not 0 <= i < mesh.n:
        raise MeshIndexError(f"vertex {i} out of range [0, {mesh.n})")
    return set(int(j) for j in mesh.neighbors(i))


def graph_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    """Combinatorial Laplacian: degree on the diagonal, -1 per edge."""
    a = mesh.adjacency
    deg = np.asarray(a.sum(axis=1)).ravel()
    lap = sparse.diags(deg) - a
    return sparse.csr_matrix(lap)


def is_symmetric(m, atol=1e-12) -> bool:
    d = (m - m.T)
    if sparse.issparse(d):
        return d.nnz == 0 or float(abs(d).max()) <= atol
    return float(np.abs(d).max(initial=0.0)) <= atol


def is_psd_sampled(m, rng: np.random.Generator, trials=20, tol=1e-9) -> bool:
    """Randomized check ``x^T M x >= -tol * |x|^2``."""
    for _ in range(trials):
        x = rng.standard_normal(m.shape[0])
        if float(x @ (m @ x)) < -tol * float(x @ x):
            return False
    return True


def icosphere(level: int = 3, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron with vertices exactly on the sphere."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
         (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return TriMesh(np.array(verts) * radius, np.array(faces))


def grid_mesh(nx: int, ny: int, spacing: float = 1.0) -> TriMesh:
    """Planar grid with every quad split along the same diagonal."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    v = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)])
    idx = np.arange(nx * ny).reshape(nx, ny)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    f = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return TriMesh(v, f)
