"""Pure numpy versions of the compiled kernels (same outputs, same order)."""
import numpy as np

from ._mc_tables import EDGE_AXIS, EDGE_START, TRIANGLES

_NTRI = (TRIANGLES >= 0).sum(axis=1) // 3


def mc_triangles(values, iso):
    v = np.ascontiguousarray(values, dtype=np.float64)
    nx, ny, nz = v.shape
    below = v < iso
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for bit, (ox, oy, oz) in enumerate([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
                                        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]):
        case |= below[ox:ox + nx - 1, oy:oy + ny - 1, oz:oz + nz - 1].astype(np.int64) << bit
    flat = case.ravel()
    cells = np.nonzero((flat != 0) & (flat != 255))[0]
    if cells.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    cc = flat[cells]
    ntri = _NTRI[cc]
    cell_rep = np.repeat(cells, ntri)
    case_rep = np.repeat(cc, ntri)
    # triangle slot within the cell
    starts = np.cumsum(ntri) - ntri
    slot = np.arange(cell_rep.size) - np.repeat(starts, ntri)
    edges = np.stack([TRIANGLES[case_rep, 3 * slot + c] for c in range(3)], axis=1)
    i, rem = np.divmod(cell_rep, (ny - 1) * (nz - 1))
    j, k = np.divmod(rem, nz - 1)
    st = EDGE_START[edges]
    base = ((i[:, None] + st[..., 0]) * ny + (j[:, None] + st[..., 1])) * nz + (k[:, None] + st[..., 2])
    return base * 3 + EDGE_AXIS[edges]


def deform_scatter(indptr, indices, P, Hinv):
    n = indptr.size - 1
    deg = np.diff(indptr)
    src = np.repeat(np.arange(n), deg)
    r = P.shape[1]
    S = np.zeros((n, r, 3))
    np.add.at(S, src, P)
    HS = Hinv @ S                         # (n, r, 3)
    HP = Hinv[src] @ P                    # (E, r, 3)
    rows, cols, vals = [], [], []

    def emit(ri, ci, blocks):
        t = np.arange(3)
        rows.append((3 * ri[:, None, None] + t[None, :, None]).repeat(3, axis=2).ravel())
        cols.append((3 * ci[:, None, None] + t[None, None, :]).repeat(3, axis=1).ravel())
        vals.append(blocks.ravel())

    has = deg > 0
    vi = np.nonzero(has)[0]
    emit(vi, vi, np.einsum("nsa,nsb->nab", S[vi], HS[vi]))
    dst = indices.astype(np.int64)
    emit(src, dst, -np.einsum("esa,esb->eab", S[src], HP))
    emit(dst, src, -np.einsum("esa,esb->eab", P, HS[src]))
    # all ordered pairs of edges leaving the same vertex
    pair_cnt = deg[src]
    e1 = np.repeat(np.arange(src.size), pair_cnt)
    first = indptr[src[e1]]
    off = np.arange(e1.size) - np.repeat(np.cumsum(pair_cnt) - pair_cnt, pair_cnt)
    e2 = first + off
    emit(dst[e1], dst[e2], np.einsum("esa,esb->eab", P[e1], HP[e2]))
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def ring_covariance(indptr, indices, rest, cur):
    n = indptr.size - 1
    src = np.repeat(np.arange(n), np.diff(indptr))
    a = rest[src] - rest[indices]
    b = cur[src] - cur[indices]
    out = np.zeros((n, 3, 3))
    np.add.at(out, src, a[:, :, None] * b[:, None, :])
    return out


def fit_rotations(S):
    u, _, vt = np.linalg.svd(S)
    r = np.transpose(vt, (0, 2, 1)) @ np.transpose(u, (0, 2, 1))
    flip = np.linalg.det(r) < 0
    if flip.any():
        vt2 = vt[flip].copy()
        vt2[:, 2, :] *= -1
        r[flip] = np.transpose(vt2, (0, 2, 1)) @ np.transpose(u[flip], (0, 2, 1))
    return r


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p; all arrays (m, 3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        out = a + ab * v[:, None] + ac * w[:, None]
        # edge regions, later assignments only where earlier tests failed
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        out = np.where(m_bc[:, None], b + (c - b) * t_bc[:, None], out)
        t_ac = d2 / (d2 - d6)
        m_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out = np.where(m_ac[:, None], a + ac * t_ac[:, None], out)
        t_ab = d1 / (d1 - d3)
        m_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out = np.where(m_ab[:, None], a + ab * t_ab[:, None], out)
    m_c = (d6 >= 0) & (d5 <= d6)
    out = np.where(m_c[:, None], c, out)
    m_b = (d3 >= 0) & (d4 <= d3)
    out = np.where(m_b[:, None], b, out)
    m_a = (d1 <= 0) & (d2 <= 0)
    out = np.where(m_a[:, None], a, out)
    return out


def closest_on_mesh(q, vidx, inc_ptr, inc_idx, V, F):
    m = q.shape[0]
    cnt = np.diff(inc_ptr)
    maxdeg = int(cnt.max()) if cnt.size else 0
    slots = np.arange(maxdeg)
    start = inc_ptr[vidx]
    valid = slots[None, None, :] < cnt[vidx][:, :, None]
    cand = np.where(valid, inc_idx[np.minimum(start[:, :, None] + slots, inc_idx.size - 1)], -1)
    cand = cand.reshape(m, -1)
    rows, cols = np.nonzero(cand >= 0)
    nf = max(F.shape[0], 1)
    key = np.unique(rows * nf + cand[rows, cols])
    rows, faces = np.divmod(key, nf)
    tri = V[F[faces]]
    cp = closest_point_on_triangles(q[rows], tri[:, 0], tri[:, 1], tri[:, 2])
    d2 = np.einsum("ij,ij->i", cp - q[rows], cp - q[rows])
    best = np.full(m, np.inf)
    np.minimum.at(best, rows, d2)
    # key order is (row, face), so the first hit per row has the lowest face
    hit = np.nonzero(d2 == best[rows])[0]
    first = np.full(m, -1)
    first[rows[hit[::-1]]] = hit[::-1]
    return cp[first], faces[first].astype(np.int64), best
