"""Induced correspondences between adjacent level sets.

A mesh ``g`` of the level set ``f(., z) = 0`` moves to the level set at
``z + eps v`` by a displacement ``d`` that keeps every vertex on the
surface to first order,

    grad_x f(g_i, z) . d_i = -eps grad_z f(g_i, z) . v,        i.e.  C d = -eps F v,

and is otherwise as undistorted as possible:

    d = argmin  d^T L d + mu |d|^2   subject to  C d = -eps F v.

The minimiser is linear in ``eps v``; ``d = -eps G v`` defines the
transfer operator ``G``.  ``G^T L G`` is the Gram matrix whose trace gives
the geometric regulariser.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .deform import DeformQuadForm, build_combined
from .errors import DegenerateConstraintError, SolverError
from .implicit import DEGENERATE_GRAD, ImplicitGenerator
from .mesh import TriMesh

DEFAULT_EPSILON = 1e-3
DEFAULT_EPS_CYC = 1e-2
MU_SCALE = 1e-6
REFINE_SWEEPS = 3
EXACT_TRACE_MAX_DIM = 64
DEFAULT_PROBES = 64


@dataclass(frozen=True)
class ConstraintSystem:
    """Linearised level-set constraints ``C d = -eps F v`` on a mesh.

    ``rows`` lists the vertices that kept a constraint; ``C`` has one row
    per kept vertex with the spatial gradient in that vertex's 3 columns.
    """

    C: sparse.csr_matrix
    F: np.ndarray
    rows: np.ndarray
    mesh: TriMesh
    z: np.ndarray
    dropped: tuple = ()

    @property
    def latent_dim(self):
        return self.F.shape[1]


@dataclass
class CorrespondenceField:
    d: np.ndarray
    v: np.ndarray
    epsilon: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def displacements(self):
        return self.d.reshape(-1, 3)


@dataclass
class TransferOperator:
    G: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def displacement(self, v, epsilon):
        return -epsilon * (self.G @ np.asarray(v, dtype=np.float64).ravel())


def build_constraints(gen: ImplicitGenerator, mesh: TriMesh, z) -> ConstraintSystem:
    """Per-vertex constraint rows from the generator's gradients."""
    z = np.asarray(z, dtype=np.float64).ravel()
    _, gx, gz = gen.value_and_grads(mesh.vertices, z)
    norms = np.linalg.norm(gx, axis=1)
    keep = norms >= DEGENERATE_GRAD
    rows = np.nonzero(keep)[0]
    if rows.size == 0:
        raise DegenerateConstraintError("every vertex has a vanishing spatial gradient")
    m = rows.size
    r = np.repeat(np.arange(m), 3)
    c = (3 * rows[:, None] + np.arange(3)).ravel()
    C = sparse.csr_matrix((gx[rows].ravel(), (r, c)), shape=(m, 3 * mesh.n))
    dropped = tuple(int(i) for i in np.nonzero(~keep)[0])
    return ConstraintSystem(C, np.ascontiguousarray(gz[rows]), rows, mesh, z, dropped)


def _matrix(L):
    m = L.matrix if isinstance(L, DeformQuadForm) else L
    return sparse.csr_matrix(m)


def default_mu(L) -> float:
    m = _matrix(L)
    return MU_SCALE * float(m.diagonal().sum()) / m.shape[0]


class KKTSolver:
    """Factorised KKT system ``[[L + mu I, C^T], [C, 0]]`` for one constraint set."""

    def __init__(self, L, cs: ConstraintSystem, mu=None, refine=REFINE_SWEEPS):
        self.L = _matrix(L)
        self.refine = int(refine)
        self.cs = cs
        nn = self.L.shape[0]
        if cs.C.shape[1] != nn:
            raise ValueError(f"constraint columns {cs.C.shape[1]} do not match L size {nn}")
        self.mu = default_mu(self.L) if mu is None else float(mu)
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        self.A = sparse.csr_matrix(self.L + self.mu * sparse.eye(nn))
        m = cs.C.shape[0]
        self.K = sparse.bmat([[self.A, cs.C.T], [cs.C, None]], format="csc")
        self.n3, self.m = nn, m
        self.method = "lu"
        self._lu = None
        self._dense = None
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                self._lu = splu(self.K)
            # an exactly singular pivot can slip through as inf/nan
            probe = self._lu.solve(np.ones(self.K.shape[0]))
            if not np.all(np.isfinite(probe)):
                raise RuntimeError("non-finite LU solve")
        except (RuntimeError, sparse.linalg.MatrixRankWarning):
            self._lu = None
            self.method = "lstsq"
            self._dense = self.K.toarray()

    def _raw(self, full):
        if self._lu is not None:
            x = self._lu.solve(full)
        else:
            x = np.linalg.lstsq(self._dense, full, rcond=None)[0]
        if not np.all(np.isfinite(x)):
            raise SolverError("KKT solve produced non-finite values")
        return x

    def solve(self, rhs_c, refine=None):
        """Solve ``C d = rhs_c`` for the least-energy ``d``.

        The first solve minimises ``d^T L d + mu |d|^2``.  Each refinement
        sweep then minimises ``d^T L d + mu |d - d_prev|^2`` with the same
        factorisation, which converges to the mu -> 0 limit (the
        minimum-norm minimiser of ``d^T L d``) at rate ``mu / (lambda + mu)``
        per mode.  ``refine=0`` returns the plain regularised solution.
        """
        sweeps = self.refine if refine is None else int(refine)
        b = np.asarray(rhs_c, dtype=np.float64)
        single = b.ndim == 1
        b = b.reshape(self.m, -1)
        full = np.zeros((self.n3 + self.m, b.shape[1]))
        full[self.n3:] = b
        x = self._raw(full)
        self.last_prev = np.zeros((self.n3, b.shape[1]))
        for _ in range(sweeps):
            self.last_prev = x[:self.n3].copy()
            full[:self.n3] = self.mu * self.last_prev
            x = self._raw(full)
        d, lam = x[:self.n3], x[self.n3:]
        if single:
            self.last_prev = self.last_prev[:, 0]
            return d[:, 0], lam[:, 0]
        return d, lam

    def residuals(self, d, lam, rhs_c):
        # stationarity of the last sweep: (L + mu I) d + C^T lam = mu d_prev
        stat = self.A @ d + self.cs.C.T @ lam - self.mu * self.last_prev
        cons = self.cs.C @ d - rhs_c
        lnorm = sparse.linalg.norm(self.L, np.inf) if self.L.nnz else 0.0
        return {
            "kkt_residual": float(np.abs(stat).max(initial=0.0)),
            "kkt_scale": float(lnorm * np.linalg.norm(d)),
            "constraint_residual": float(np.abs(cons).max(initial=0.0)),
        }


def solve_displacement(L, cs: ConstraintSystem, v, epsilon=DEFAULT_EPSILON, mu=None,
                       solver: KKTSolver | None = None, refine=None) -> CorrespondenceField:
    """Induced displacement for latent direction ``v`` and step ``epsilon``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != cs.latent_dim:
        raise ValueError(f"direction has dimension {v.size}, expected {cs.latent_dim}")
    if not np.all(np.isfinite(v)):
        raise ValueError("direction has non-finite entries")
    s = solver if solver is not None else KKTSolver(L, cs, mu)
    rhs = -epsilon * (cs.F @ v)
    d, lam = s.solve(rhs, refine)
    diag = s.residuals(d, lam, rhs)
    diag.update({
        "mu": s.mu,
        "refine_sweeps": s.refine if refine is None else int(refine),
        "method": s.method,
        "dropped_constraints": len(cs.dropped),
        "objective": float(d @ (s.L @ d) + s.mu * (d @ d)),
    })
    return CorrespondenceField(d, v, float(epsilon), diag)


def transfer_operator(L, cs: ConstraintSystem, mu=None, solver: KKTSolver | None = None,
                      refine=None) -> TransferOperator:
    """``G`` with ``d^v = -eps G v``, one KKT solve per latent basis vector."""
    s = solver if solver is not None else KKTSolver(L, cs, mu)
    G, _ = s.solve(cs.F, refine)
    return TransferOperator(G, {"mu": s.mu, "method": s.method, "dropped_constraints": len(cs.dropped)})


def ball_volume(d: int) -> float:
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)


def gram_energy(L, G) -> np.ndarray:
    """``E = G^T L G`` (d x d)."""
    m = _matrix(L)
    return G.T @ (m @ G)


def parse_trace_mode(mode):
    """'auto', 'exact' or 'hutchinson:m' -> (kind, m)."""
    if mode in (None, "auto"):
        return "auto", DEFAULT_PROBES
    if mode == "exact":
        return "exact", 0
    if isinstance(mode, str) and mode.startswith("hutchinson"):
        parts = mode.split(":")
        m = int(parts[1]) if len(parts) > 1 and parts[1] else DEFAULT_PROBES
        if m < 1:
            raise ValueError("need at least one probe")
        return "hutchinson", m
    raise ValueError(f"unknown trace mode {mode!r}")


def trace_energy(L, cs: ConstraintSystem, mu=None, trace_mode="auto", rng=None, solver=None):
    """Tr(E), exactly for d <= 64 and by Hutchinson probing otherwise.

    Returns ``(trace, info)``.
    """
    kind, m = parse_trace_mode(trace_mode)
    d = cs.latent_dim
    if kind == "auto":
        kind = "exact" if d <= EXACT_TRACE_MAX_DIM else "hutchinson"
    s = solver if solver is not None else KKTSolver(L, cs, mu)
    Lm = s.L
    if kind == "exact":
        G, _ = s.solve(cs.F)
        # each column is a PSD quadratic form; clamp rounding below zero
        cols = np.maximum(np.einsum("ij,ij->j", G, Lm @ G), 0.0)
        return float(cols.sum()), {"trace_mode": "exact", "mu": s.mu}
    rng = rng if rng is not None else np.random.default_rng(0)
    w = rng.choice([-1.0, 1.0], size=(d, m))
    D, _ = s.solve(cs.F @ w)
    vals = np.maximum(np.einsum("ij,ij->j", D, Lm @ D), 0.0)
    return float(vals.mean()), {"trace_mode": f"hutchinson:{m}", "mu": s.mu,
                                "stderr": float(vals.std(ddof=1) / math.sqrt(m)) if m > 1 else float("nan")}


def r_geo(L, cs: ConstraintSystem, mu=None, trace_mode="auto", rng=None, solver=None) -> float:
    """Geometric regulariser ``Vol(B_d) / d * Tr(G^T L G)``."""
    tr, _ = trace_energy(L, cs, mu, trace_mode, rng, solver)
    d = cs.latent_dim
    return ball_volume(d) / d * tr


def _combined_on(mesh, alpha):
    return build_combined(mesh, alpha)


def transfer_at(gen, mesh, z, alpha=10.0, mu=None):
    """Transfer operator of ``mesh`` as a discretisation of the z level set."""
    L = _combined_on(mesh, alpha)
    cs = build_constraints(gen, mesh, z)
    return transfer_operator(L, cs, mu), L, cs


def cycle_terms(gen, mesh: TriMesh, z, i: int, eps_cyc=DEFAULT_EPS_CYC, alpha=10.0, mu=None):
    """``(G(z), G(z + eps_cyc e_i))`` in the vertex frame of ``mesh``.

    The second operator is built on ``mesh`` displaced by the induced field
    of the step ``eps_cyc e_i``, so both refer to the same vertices.
    """
    if eps_cyc <= 0:
        raise ValueError("eps_cyc must be positive")
    z = np.asarray(z, dtype=np.float64).ravel()
    if not 0 <= i < z.size:
        raise IndexError(f"basis index {i} out of range for latent dim {z.size}")
    op0, _, _ = transfer_at(gen, mesh, z, alpha, mu)
    step = np.zeros_like(z)
    step[i] = 1.0
    moved = mesh.with_vertices(mesh.vertices + op0.displacement(step, eps_cyc).reshape(-1, 3))
    z1 = z + eps_cyc * step
    try:
        op1, _, cs1 = transfer_at(gen, moved, z1, alpha, mu)
    except DegenerateConstraintError as exc:
        raise DegenerateConstraintError(f"perturbed constraints at z + {eps_cyc} e_{i} are degenerate: {exc}") from exc
    return op0.G, op1.G


def cycle_residual(gen, z, i: int, eps_cyc=DEFAULT_EPS_CYC, mesh: TriMesh | None = None, grid=None,
                   simplify_target=None, alpha=10.0, mu=None, epsilon=DEFAULT_EPSILON,
                   normalize=False) -> float:
    """``(1/epsilon) |G(z + eps_cyc e_i) - G(z)|_F^2`` on a shared vertex frame.

    ``mesh`` is the discretised z level set; when omitted it is extracted
    on ``grid`` (and simplified to ``simplify_target`` faces if given).
    With ``normalize`` the result is divided by 3n.
    """
    if mesh is None:
        if grid is None:
            raise ValueError("need a mesh or a grid")
        from .marching import marching_cubes
        mesh = marching_cubes(gen, z, grid)
        if simplify_target:
            from .simplify import simplify
            mesh = simplify(mesh, simplify_target)
    G0, G1 = cycle_terms(gen, mesh, z, i, eps_cyc, alpha, mu)
    val = float(np.sum((G1 - G0) ** 2)) / epsilon
    if normalize:
        val /= 3 * mesh.n
    return val


def three_cycle_residual(gen, mesh: TriMesh, z, v, v2, epsilon, alpha=10.0, mu=None) -> float:
    """``|d^v(z) + d^{v'-v}(z + eps v) - d^{v'}(z)|`` composed explicitly."""
    z = np.asarray(z, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    v2 = np.asarray(v2, dtype=np.float64).ravel()
    L0 = _combined_on(mesh, alpha)
    cs0 = build_constraints(gen, mesh, z)
    s0 = KKTSolver(L0, cs0, mu)
    dv = solve_displacement(L0, cs0, v, epsilon, solver=s0).d
    dv2 = solve_displacement(L0, cs0, v2, epsilon, solver=s0).d
    moved = mesh.with_vertices(mesh.vertices + dv.reshape(-1, 3))
    L1 = _combined_on(moved, alpha)
    cs1 = build_constraints(gen, moved, z + epsilon * v)
    dmid = solve_displacement(L1, cs1, v2 - v, epsilon, mu=mu).d if np.any(v2 != v) else np.zeros_like(dv)
    return float(np.linalg.norm(dv + dmid - dv2))


def project_to_level_set(gen, points, z, max_step, iters=3):
    """Newton steps ``x -= f grad / |grad|^2`` with each step length capped."""
    x = np.array(points, dtype=np.float64)
    for _ in range(iters):
        f, gx, _ = gen.value_and_grads(x, z)
        g2 = np.einsum("ij,ij->i", gx, gx)
        ok = g2 > DEGENERATE_GRAD ** 2
        step = np.zeros_like(x)
        step[ok] = -(f[ok] / g2[ok])[:, None] * gx[ok]
        ln = np.linalg.norm(step, axis=1)
        scale = np.where(ln > max_step, max_step / np.where(ln > 0, ln, 1.0), 1.0)
        x += step * scale[:, None]
    return x


def advect(gen, mesh: TriMesh, z, v, epsilon=DEFAULT_EPSILON, alpha=10.0, mu=None, project=True,
           L=None):
    """Move ``mesh`` from the z level set to the ``z + eps v`` level set.

    Returns ``(mesh', z + eps v)``; with ``project`` each moved vertex
    takes up to three Newton steps onto the new level set, each at most
    ``0.5 eps`` long.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    z1 = z + epsilon * v
    if not np.any(v):
        return mesh, z1
    L = _combined_on(mesh, alpha) if L is None else L
    cs = build_constraints(gen, mesh, z)
    fld = solve_displacement(L, cs, v, epsilon, mu)
    pts = mesh.vertices + fld.displacements
    if project:
        pts = project_to_level_set(gen, pts, z1, 0.5 * epsilon)
    return mesh.with_vertices(pts), z1


def advect_between(gen, mesh: TriMesh, z_start, z_end, step=DEFAULT_EPSILON, alpha=10.0, mu=None,
                   project=True):
    """Chain ``advect`` in equal latent steps of length at most ``step``."""
    a = np.asarray(z_start, dtype=np.float64).ravel()
    b = np.asarray(z_end, dtype=np.float64).ravel()
    dist = float(np.linalg.norm(b - a))
    if dist == 0:
        return mesh
    k = max(1, int(math.ceil(dist / step - 1e-9)))
    v = (b - a) / dist
    eps = dist / k
    z = a
    for _ in range(k):
        mesh, z = advect(gen, mesh, z, v, eps, alpha, mu, project)
    return mesh
