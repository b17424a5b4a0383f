"""Marching-cubes extraction of implicit-surface level sets."""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import kernels
from .errors import EmptySurfaceError
from .implicit import ImplicitGenerator, VoxelGrid
from .mesh import TriMesh


def sample_grid(gen: ImplicitGenerator, z, grid: VoxelGrid, workers: int = 1) -> np.ndarray:
    """Field values on the grid, evaluated slab by slab along x.

    Slabs are concatenated in index order, so the result does not depend
    on ``workers``.
    """
    nx = grid.dims[0]

    def slab(i):
        pts = grid.points(slice(i, i + 1)).reshape(-1, 3)
        return gen.value(pts, z).reshape(1, grid.dims[1], grid.dims[2])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(slab, range(nx)))
    else:
        parts = [slab(i) for i in range(nx)]
    return np.concatenate(parts, axis=0)


def extract_from_values(values, grid: VoxelGrid, iso: float = 0.0, backend=None):
    """Triangulate the ``iso`` level of a sampled grid.

    Returns ``(mesh, info)`` where ``info["clipped"]`` is True when the
    surface touches the grid boundary and so has open borders.
    """
    v = np.ascontiguousarray(values, dtype=np.float64)
    if v.shape != tuple(grid.dims):
        raise ValueError(f"values have shape {v.shape}, grid dims are {grid.dims}")
    tris = kernels.mc_triangles(v, iso, backend=backend)
    if tris.shape[0] == 0:
        raise EmptySurfaceError("level set does not cross the grid")
    eids, inv = np.unique(tris.ravel(), return_inverse=True)
    point, axis = np.divmod(eids, 3)
    ny, nz = grid.dims[1], grid.dims[2]
    i, rem = np.divmod(point, ny * nz)
    j, k = np.divmod(rem, nz)
    ijk = np.stack([i, j, k], axis=1)
    ijk1 = ijk.copy()
    ijk1[np.arange(ijk.shape[0]), axis] += 1
    v0 = v[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
    v1 = v[ijk1[:, 0], ijk1[:, 1], ijk1[:, 2]]
    t = (iso - v0) / (v1 - v0)
    org = np.asarray(grid.origin)
    sp = np.asarray(grid.spacing)
    pos = org + ijk * sp
    pos[np.arange(pos.shape[0]), axis] += t * sp[axis]
    faces = inv.reshape(-1, 3)
    # weld coincident vertices (level set passing exactly through grid points)
    upos, first, remap = np.unique(pos, axis=0, return_index=True, return_inverse=True)
    if upos.shape[0] != pos.shape[0]:
        order = np.argsort(first)
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        pos = upos[order]
        faces = rank[remap.ravel()][faces]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    # table winding gives inward normals with bit = below iso; flip to outward
    faces = faces[:, [0, 2, 1]]
    mesh = TriMesh(pos, faces).compact()
    inside = v < iso
    clipped = bool(inside[0].any() or inside[-1].any() or inside[:, 0].any() or inside[:, -1].any()
                   or inside[:, :, 0].any() or inside[:, :, -1].any())
    return mesh, {"clipped": clipped}


def marching_cubes_with_info(gen: ImplicitGenerator, z, grid: VoxelGrid, iso: float = 0.0,
                             workers: int = 1, backend=None):
    values = sample_grid(gen, z, grid, workers)
    return extract_from_values(values, grid, iso, backend)


def marching_cubes(gen: ImplicitGenerator, z, grid: VoxelGrid, iso: float = 0.0, workers: int = 1) -> TriMesh:
    """Zero level set of ``gen(., z)`` as a triangle mesh with outward normals."""
    mesh, info = marching_cubes_with_info(gen, z, grid, iso, workers)
    if info["clipped"]:
        warnings.warn("marching_cubes: surface is clipped by the grid boundary", RuntimeWarning)
    return mesh
