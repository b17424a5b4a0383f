# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops; numpy equivalents live in ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt

from ._mc_tables import TRIANGLES, EDGE_START, EDGE_AXIS

cnp.import_array()

ctypedef cnp.int64_t i64


def mc_triangles(const double[:, :, ::1] values, double iso):
    """Triangles of the zero set as global edge ids, cells in C order."""
    cdef Py_ssize_t nx = values.shape[0], ny = values.shape[1], nz = values.shape[2]
    cdef const i64[:, ::1] tab = np.ascontiguousarray(TRIANGLES, dtype=np.int64)
    cdef const i64[:, ::1] es = np.ascontiguousarray(EDGE_START, dtype=np.int64)
    cdef const i64[::1] ea = np.ascontiguousarray(EDGE_AXIS, dtype=np.int64)
    cdef Py_ssize_t i, j, k, t, cap = 1024, m = 0
    cdef int case, e
    cdef i64 base
    cdef i64 eid[12]
    out = np.empty((cap, 3), dtype=np.int64)
    cdef i64[:, ::1] ov = out
    for i in range(nx - 1):
        for j in range(ny - 1):
            for k in range(nz - 1):
                case = 0
                if values[i, j, k] < iso: case |= 1
                if values[i + 1, j, k] < iso: case |= 2
                if values[i + 1, j + 1, k] < iso: case |= 4
                if values[i, j + 1, k] < iso: case |= 8
                if values[i, j, k + 1] < iso: case |= 16
                if values[i + 1, j, k + 1] < iso: case |= 32
                if values[i + 1, j + 1, k + 1] < iso: case |= 64
                if values[i, j + 1, k + 1] < iso: case |= 128
                if case == 0 or case == 255:
                    continue
                for e in range(12):
                    base = ((i + es[e, 0]) * ny + (j + es[e, 1])) * nz + (k + es[e, 2])
                    eid[e] = base * 3 + ea[e]
                t = 0
                while t < 16 and tab[case, t] >= 0:
                    if m == cap:
                        cap *= 2
                        out = np.resize(out, (cap, 3))
                        ov = out
                    ov[m, 0] = eid[tab[case, t]]
                    ov[m, 1] = eid[tab[case, t + 1]]
                    ov[m, 2] = eid[tab[case, t + 2]]
                    m += 1
                    t += 3
    return out[:m].copy()


def deform_scatter(const i64[::1] indptr, const i64[::1] indices,
                   const double[:, :, ::1] P, const double[:, :, ::1] Hinv):
    """COO triplets of sum_i A_i^T Hinv_i A_i.

    ``P[e]`` is the r x 3 block of directed edge e (CSR order) so that
    A_i has block sum_e P[e] at vertex i and -P[e] at the edge head.
    """
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t r = P.shape[1]
    cdef Py_ssize_t total = 0, i, kdeg, a, b, p, q, s, t, u, cnt = 0, e0
    for i in range(n):
        kdeg = indptr[i + 1] - indptr[i]
        if kdeg:
            total += 9 * (kdeg + 1) * (kdeg + 1)
    rows = np.empty(total, dtype=np.int64)
    cols = np.empty(total, dtype=np.int64)
    vals = np.empty(total, dtype=np.float64)
    cdef i64[::1] rv = rows, cv = cols
    cdef double[::1] vv = vals
    cdef double[:, :, ::1] blk
    cdef double[:, :, ::1] hb
    cdef i64[::1] vid
    cdef double acc
    cdef Py_ssize_t maxdeg = 0
    for i in range(n):
        if indptr[i + 1] - indptr[i] > maxdeg:
            maxdeg = indptr[i + 1] - indptr[i]
    blk = np.zeros((maxdeg + 1, r, 3))
    hb = np.zeros((maxdeg + 1, r, 3))
    vid = np.zeros(maxdeg + 1, dtype=np.int64)
    for i in range(n):
        e0 = indptr[i]
        kdeg = indptr[i + 1] - e0
        if kdeg == 0:
            continue
        # blocks X_0 = sum P, X_{1+m} = -P[e0+m]
        vid[0] = i
        for p in range(r):
            for q in range(3):
                blk[0, p, q] = 0.0
        for a in range(kdeg):
            vid[a + 1] = indices[e0 + a]
            for p in range(r):
                for q in range(3):
                    blk[0, p, q] += P[e0 + a, p, q]
                    blk[a + 1, p, q] = -P[e0 + a, p, q]
        # hb[a] = Hinv_i X_a
        for a in range(kdeg + 1):
            for p in range(r):
                for q in range(3):
                    acc = 0.0
                    for s in range(r):
                        acc += Hinv[i, p, s] * blk[a, s, q]
                    hb[a, p, q] = acc
        for a in range(kdeg + 1):
            for b in range(kdeg + 1):
                for t in range(3):
                    for u in range(3):
                        acc = 0.0
                        for s in range(r):
                            acc += blk[a, s, t] * hb[b, s, u]
                        rv[cnt] = 3 * vid[a] + t
                        cv[cnt] = 3 * vid[b] + u
                        vv[cnt] = acc
                        cnt += 1
    return rows, cols, vals


def ring_covariance(const i64[::1] indptr, const i64[::1] indices,
                    const double[:, ::1] rest, const double[:, ::1] cur):
    """Per-vertex sum_j (rest_i - rest_j)(cur_i - cur_j)^T."""
    cdef Py_ssize_t n = indptr.shape[0] - 1, i, e, j, p, q
    cdef double a[3]
    cdef double b[3]
    out = np.zeros((n, 3, 3))
    cdef double[:, :, ::1] ov = out
    for i in range(n):
        for e in range(indptr[i], indptr[i + 1]):
            j = indices[e]
            for p in range(3):
                a[p] = rest[i, p] - rest[j, p]
                b[p] = cur[i, p] - cur[j, p]
            for p in range(3):
                for q in range(3):
                    ov[i, p, q] += a[p] * b[q]
    return out


cdef inline void _closest_tri(const double* p, const double* a, const double* b, const double* c,
                              double* out) noexcept nogil:
    cdef double ab[3]
    cdef double ac[3]
    cdef double ap[3]
    cdef double bp[3]
    cdef double cp[3]
    cdef int t
    cdef double d1 = 0, d2 = 0, d3 = 0, d4 = 0, d5 = 0, d6 = 0, va, vb, vc, v, w, den
    for t in range(3):
        ab[t] = b[t] - a[t]
        ac[t] = c[t] - a[t]
        ap[t] = p[t] - a[t]
        bp[t] = p[t] - b[t]
        cp[t] = p[t] - c[t]
        d1 += ab[t] * ap[t]
        d2 += ac[t] * ap[t]
        d3 += ab[t] * bp[t]
        d4 += ac[t] * bp[t]
        d5 += ab[t] * cp[t]
        d6 += ac[t] * cp[t]
    if d1 <= 0 and d2 <= 0:
        for t in range(3):
            out[t] = a[t]
        return
    if d3 >= 0 and d4 <= d3:
        for t in range(3):
            out[t] = b[t]
        return
    if d6 >= 0 and d5 <= d6:
        for t in range(3):
            out[t] = c[t]
        return
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        for t in range(3):
            out[t] = a[t] + v * ab[t]
        return
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        for t in range(3):
            out[t] = a[t] + w * ac[t]
        return
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        for t in range(3):
            out[t] = b[t] + w * (c[t] - b[t])
        return
    den = va + vb + vc
    if den != 0:
        v = vb / den
        w = vc / den
    else:
        v = 0
        w = 0
    for t in range(3):
        out[t] = a[t] + v * ab[t] + w * ac[t]


def closest_on_mesh(const double[:, ::1] q, const i64[:, ::1] vidx, const i64[::1] inc_ptr,
                    const i64[::1] inc_idx, const double[:, ::1] V, const i64[:, ::1] F):
    """Closest points among faces incident to candidate vertices; lowest face wins ties."""
    cdef Py_ssize_t m = q.shape[0], kk = vidx.shape[1], i, a, s, f, t
    out = np.empty((m, 3))
    face = np.empty(m, dtype=np.int64)
    dist = np.empty(m)
    cdef double[:, ::1] ov = out
    cdef i64[::1] fv = face
    cdef double[::1] dv = dist
    cdef double c[3]
    cdef double best, d, diff
    cdef i64 bf
    with nogil:
        for i in range(m):
            best = 1e308
            bf = -1
            for a in range(kk):
                for s in range(inc_ptr[vidx[i, a]], inc_ptr[vidx[i, a] + 1]):
                    f = inc_idx[s]
                    _closest_tri(&q[i, 0], &V[F[f, 0], 0], &V[F[f, 1], 0], &V[F[f, 2], 0], c)
                    d = 0
                    for t in range(3):
                        diff = c[t] - q[i, t]
                        d += diff * diff
                    if d < best or (d == best and f < bf):
                        best = d
                        bf = f
                        for t in range(3):
                            ov[i, t] = c[t]
            fv[i] = bf
            dv[i] = best
    return out, face, dist


cdef void _jacobi4(double* N, double* V) noexcept nogil:
    # cyclic Jacobi on a symmetric 4x4 (row-major); eigenvectors in columns of V
    cdef int sweep, p, q, k
    cdef double off, scale = 0.0, theta, t, c, s, tau, apq, app, aqq, akp, akq, vkp, vkq
    for p in range(16):
        V[p] = 0.0
        scale += N[p] * N[p]
    for p in range(4):
        V[5 * p] = 1.0
    for sweep in range(50):
        off = 0.0
        for p in range(4):
            for q in range(p + 1, 4):
                off += N[4 * p + q] * N[4 * p + q]
        if off <= 1e-34 * scale:
            break
        for p in range(4):
            for q in range(p + 1, 4):
                apq = N[4 * p + q]
                if apq * apq <= 1e-40 * scale:
                    continue
                app = N[5 * p]
                aqq = N[5 * q]
                theta = (aqq - app) / (2.0 * apq)
                t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                tau = s / (1.0 + c)
                N[5 * p] = app - t * apq
                N[5 * q] = aqq + t * apq
                N[4 * p + q] = 0.0
                N[4 * q + p] = 0.0
                for k in range(4):
                    if k != p and k != q:
                        akp = N[4 * k + p]
                        akq = N[4 * k + q]
                        N[4 * k + p] = akp - s * (akq + tau * akp)
                        N[4 * p + k] = N[4 * k + p]
                        N[4 * k + q] = akq + s * (akp - tau * akq)
                        N[4 * q + k] = N[4 * k + q]
                for k in range(4):
                    vkp = V[4 * k + p]
                    vkq = V[4 * k + q]
                    V[4 * k + p] = vkp - s * (vkq + tau * vkp)
                    V[4 * k + q] = vkq + s * (vkp - tau * vkq)


def fit_rotations(const double[:, :, ::1] S):
    """Rotations in SO(3) maximising tr(R S_i) via the top eigenvector of Horn's 4x4 matrix."""
    cdef Py_ssize_t n = S.shape[0], i
    cdef double N[16]
    cdef double V[16]
    cdef double xx, xy, xz, yx, yy, yz, zx, zy, zz, a, b, c, d, nq
    cdef int k, best
    out = np.empty((n, 3, 3))
    cdef double[:, :, ::1] R = out
    with nogil:
        for i in range(n):
            xx = S[i, 0, 0]; xy = S[i, 0, 1]; xz = S[i, 0, 2]
            yx = S[i, 1, 0]; yy = S[i, 1, 1]; yz = S[i, 1, 2]
            zx = S[i, 2, 0]; zy = S[i, 2, 1]; zz = S[i, 2, 2]
            N[0] = xx + yy + zz; N[1] = yz - zy; N[2] = zx - xz; N[3] = xy - yx
            N[5] = xx - yy - zz; N[6] = xy + yx; N[7] = zx + xz
            N[10] = -xx + yy - zz; N[11] = yz + zy
            N[15] = -xx - yy + zz
            N[4] = N[1]; N[8] = N[2]; N[12] = N[3]
            N[9] = N[6]; N[13] = N[7]; N[14] = N[11]
            _jacobi4(N, V)
            best = 0
            for k in range(1, 4):
                if N[5 * k] > N[5 * best]:
                    best = k
            a = V[best]; b = V[4 + best]; c = V[8 + best]; d = V[12 + best]
            nq = a * a + b * b + c * c + d * d
            a /= sqrt(nq); b /= sqrt(nq); c /= sqrt(nq); d /= sqrt(nq)
            R[i, 0, 0] = a * a + b * b - c * c - d * d
            R[i, 0, 1] = 2 * (b * c - a * d)
            R[i, 0, 2] = 2 * (b * d + a * c)
            R[i, 1, 0] = 2 * (b * c + a * d)
            R[i, 1, 1] = a * a - b * b + c * c - d * d
            R[i, 1, 2] = 2 * (c * d - a * b)
            R[i, 2, 0] = 2 * (b * d - a * c)
            R[i, 2, 1] = 2 * (c * d + a * b)
            R[i, 2, 2] = a * a - b * b - c * c + d * d
    return out
