"""Quadric-error-metric edge-collapse simplification."""
from __future__ import annotations

import heapq
import warnings

import numpy as np

from .mesh import TriMesh

DEFAULT_TARGET_FACES = 2000
BOUNDARY_WEIGHT = 1e3


def _face_quadrics(v, f):
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    area2 = np.linalg.norm(n, axis=1)
    nn = n / np.where(area2 > 0, area2, 1.0)[:, None]
    p = np.column_stack([nn, -np.einsum("ij,ij->i", nn, v[f[:, 0]])])
    # area weighting keeps slivers from dominating
    return 0.5 * area2[:, None, None] * p[:, :, None] * p[:, None, :]


def _boundary_quadrics(v, f, nv):
    q = np.zeros((nv, 4, 4))
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    fid = np.tile(np.arange(f.shape[0]), 3)
    key = np.sort(e, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    bnd = counts[inv] == 1
    if not bnd.any():
        return q
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    for (a, b), k in zip(e[bnd], fid[bnd]):
        d = v[b] - v[a]
        nrm = np.cross(d, fn[k])
        ln = np.linalg.norm(nrm)
        if ln == 0:
            continue
        nrm /= ln
        p = np.append(nrm, -nrm @ v[a])
        kq = BOUNDARY_WEIGHT * np.dot(d, d) * np.outer(p, p)
        q[a] += kq
        q[b] += kq
    return q


# symmetric 4x4 quadrics are kept as their 10 upper-triangle entries
_UT = np.triu_indices(4)
COND_LIMIT = 1e10
# a collapse may not turn a surviving face normal by more than ~78 degrees,
# either from its own old normal or from the local surface normal
FOLD_COS = 0.2
# nor create a needle: compactness 2*sqrt(3)*|cross| / sum(edge^2), 1 for equilateral
MIN_COMPACTNESS = 0.05


def _compactness(p, n):
    s = _dot(_sub(p[1], p[0]), _sub(p[1], p[0])) + _dot(_sub(p[2], p[1]), _sub(p[2], p[1])) \
        + _dot(_sub(p[0], p[2]), _sub(p[0], p[2]))
    return 2.0 * 3.0 ** 0.5 * _dot(n, n) ** 0.5 / s if s > 0 else 0.0


def _to10(q):
    return q[..., _UT[0], _UT[1]]


def _cost(q, x, y, z):
    return (q[0] * x * x + 2 * q[1] * x * y + 2 * q[2] * x * z + 2 * q[3] * x
            + q[4] * y * y + 2 * q[5] * y * z + 2 * q[6] * y
            + q[7] * z * z + 2 * q[8] * z + q[9])


def _optimal(q, va, vb):
    """Minimiser of the quadric (or the best of endpoints and midpoint) and its cost."""
    a00, a01, a02, b0, a11, a12, b1, a22, b2 = q[0], q[1], q[2], q[3], q[4], q[5], q[6], q[7], q[8]
    c00 = a11 * a22 - a12 * a12
    c01 = a02 * a12 - a01 * a22
    c02 = a01 * a12 - a02 * a11
    det = a00 * c00 + a01 * c01 + a02 * c02
    # Frobenius-norm condition number of the 3x3 block
    c11 = a00 * a22 - a02 * a02
    c12 = a01 * a02 - a00 * a12
    c22 = a00 * a11 - a01 * a01
    if det != 0.0:
        na = (a00 * a00 + a11 * a11 + a22 * a22 + 2 * (a01 * a01 + a02 * a02 + a12 * a12)) ** 0.5
        nc = (c00 * c00 + c11 * c11 + c22 * c22 + 2 * (c01 * c01 + c02 * c02 + c12 * c12)) ** 0.5
        if na * nc / abs(det) < COND_LIMIT:
            x = -(c00 * b0 + c01 * b1 + c02 * b2) / det
            y = -(c01 * b0 + c11 * b1 + c12 * b2) / det
            z = -(c02 * b0 + c12 * b1 + c22 * b2) / det
            return (x, y, z), _cost(q, x, y, z)
    best = None
    mid = ((va[0] + vb[0]) * 0.5, (va[1] + vb[1]) * 0.5, (va[2] + vb[2]) * 0.5)
    for x in (tuple(va), tuple(vb), mid):
        c = _cost(q, *x)
        if best is None or c < best[1]:
            best = (x, c)
    return best


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def simplify_with_info(mesh: TriMesh, target_faces: int):
    """Collapse edges until at most ``target_faces`` remain.

    Returns ``(mesh, info)``; ``info["reached_target"]`` is False when no
    further collapse was valid.
    """
    if target_faces < 4:
        raise ValueError("target_faces must be >= 4")
    if mesh.n_faces <= target_faces:
        return mesh, {"reached_target": True, "collapses": 0}

    faces_np = mesh.faces
    nv = mesh.n
    q4 = np.zeros((nv, 4, 4))
    fq = _face_quadrics(mesh.vertices, faces_np)
    for k in range(3):
        np.add.at(q4, faces_np[:, k], fq)
    q4 += _boundary_quadrics(mesh.vertices, faces_np, nv)
    q = [list(r) for r in _to10(q4).tolist()]
    v = [tuple(r) for r in mesh.vertices.tolist()]
    faces = [list(f) for f in faces_np.tolist()]

    alive_f = [True] * len(faces)
    vfaces = [set() for _ in range(nv)]
    for fi, (a, b, c) in enumerate(faces):
        vfaces[a].add(fi)
        vfaces[b].add(fi)
        vfaces[c].add(fi)
    alive_v = [True] * nv
    version = [0] * nv
    n_alive = len(faces)

    heap = []

    def push(i, j):
        if i > j:
            i, j = j, i
        qi, qj = q[i], q[j]
        x, cost = _optimal([qi[t] + qj[t] for t in range(10)], v[i], v[j])
        heapq.heappush(heap, (cost, i, j, version[i], version[j], x))

    for i, j in mesh.edges.tolist():
        push(i, j)

    def ring(i):
        s = set()
        for fi in vfaces[i]:
            s.update(faces[fi])
        s.discard(i)
        return s

    def valid(i, j, x):
        shared = vfaces[i] & vfaces[j]
        if not shared:
            return False
        opp = set()
        for fi in shared:
            opp.update(t for t in faces[fi] if t != i and t != j)
        if ring(i) & ring(j) != opp:
            return False
        if n_alive - len(shared) < 4:
            return False
        # reference orientation: area-weighted normal of the surface around the edge
        ref = (0.0, 0.0, 0.0)
        for fi in vfaces[i] | vfaces[j]:
            p = [v[t] for t in faces[fi]]
            c = _cross(_sub(p[1], p[0]), _sub(p[2], p[0]))
            ref = (ref[0] + c[0], ref[1] + c[1], ref[2] + c[2])
        rr = _dot(ref, ref)
        for fi in (vfaces[i] | vfaces[j]) - shared:
            tri = faces[fi]
            p = [v[t] for t in tri]
            old = _cross(_sub(p[1], p[0]), _sub(p[2], p[0]))
            p2 = [x if (t == i or t == j) else v[t] for t in tri]
            new = _cross(_sub(p2[1], p2[0]), _sub(p2[2], p2[0]))
            dn = _dot(old, new)
            nn = _dot(new, new)
            if dn <= 0 or dn * dn <= FOLD_COS * FOLD_COS * _dot(old, old) * nn:
                return False
            dr = _dot(ref, new)
            if dr <= 0 or dr * dr <= FOLD_COS * FOLD_COS * rr * nn:
                return False
            qn = _compactness(p2, new)
            if qn < MIN_COMPACTNESS and qn < _compactness(p, old):
                return False
        return True

    collapses = 0
    while n_alive > target_faces and heap:
        cost, i, j, vi, vj, x = heapq.heappop(heap)
        if not (alive_v[i] and alive_v[j]) or version[i] != vi or version[j] != vj:
            continue
        if not valid(i, j, x):
            continue
        shared = vfaces[i] & vfaces[j]
        for fi in shared:
            alive_f[fi] = False
            for t in faces[fi]:
                if t != i and t != j:
                    vfaces[t].discard(fi)
            n_alive -= 1
        for fi in vfaces[j] - shared:
            tri = faces[fi]
            tri[tri.index(j)] = i
            vfaces[i].add(fi)
        vfaces[i] -= shared
        vfaces[j] = set()
        alive_v[j] = False
        v[i] = x
        qi, qj = q[i], q[j]
        for t in range(10):
            qi[t] += qj[t]
        version[i] += 1
        collapses += 1
        # only edges at i change cost; stale entries fail the version check
        for k in sorted(ring(i)):
            push(i, k)

    keep_f = np.array([f for f, alive in zip(faces, alive_f) if alive], dtype=np.int64).reshape(-1, 3)
    out = TriMesh(np.array(v, dtype=np.float64), keep_f).compact()
    reached = n_alive <= target_faces
    return out, {"reached_target": reached, "collapses": collapses}


def simplify(mesh: TriMesh, target_faces: int = DEFAULT_TARGET_FACES) -> TriMesh:
    out, info = simplify_with_info(mesh, target_faces)
    if not info["reached_target"]:
        warnings.warn(f"simplify: stopped at {out.n_faces} faces (target {target_faces})", RuntimeWarning)
    return out
