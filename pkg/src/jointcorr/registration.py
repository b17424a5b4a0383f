"""Non-rigid ARAP registration, interpolation-guided registration and the shape graph."""
from __future__ import annotations

import heapq
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.spatial.transform import Rotation

from . import kernels
from .errors import EmptySurfaceError, GraphError
from .implicit import latent_path
from .mesh import TriMesh, graph_laplacian
from .spatial import PointIndex, SurfaceIndex

DEFAULT_K_HUMAN = 25
DEFAULT_K_ANIMAL = 40
FALLBACK_RESIDUAL_FRACTION = 0.02


@dataclass
class RegistrationConfig:
    """Outer-loop settings.

    The loop stops when both the ARAP energy and the data residual change
    by less than ``tol`` relative (plus a tiny absolute floor).
    ``anderson`` is the depth of the safeguarded Anderson acceleration;
    an accelerated iterate is only accepted when it lowers the total
    energy, so 0 recovers plain alternation.
    """
    w_data: float = 1.0
    max_iters: int = 100
    tol: float = 1e-10
    rigid_init: bool = True
    rigid_iters: int = 50
    point_to_plane: bool = False
    anderson: int = 5
    divergence_patience: int = 5


@dataclass
class RegistrationResult:
    deformed: TriMesh
    data_residual: float
    arap_energy: float
    iterations: int
    history: list = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    step_residuals: list = field(default_factory=list)


def _kabsch(src, dst):
    """Rotation R and translation t minimising sum |R src + t - dst|^2."""
    cs, cd = src.mean(0), dst.mean(0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    dfix = np.sign(np.linalg.det(vt.T @ u.T))
    if dfix == 0:
        dfix = 1.0
    r = vt.T @ np.diag([1.0, 1.0, dfix]) @ u.T
    return r, cd - r @ cs


def rigid_icp(points, target_index: SurfaceIndex, iters=50, tol=1e-14):
    """Rigid ICP against closest surface points; returns the moved points.

    Uses point-to-plane Gauss-Newton steps (minimum-norm for unobservable
    motions), falling back to a Kabsch step when a step does not reduce
    the mean squared distance.
    """
    p = np.array(points, dtype=np.float64)
    fn = target_index.mesh.face_normals()
    c, f, d2 = target_index.query(p)
    err = float(d2.mean())
    for _ in range(iters):
        if err == 0.0:
            break
        nrm = fn[f]
        a = np.hstack([np.cross(p, nrm), nrm])
        rhs = np.einsum("ij,ij->i", nrm, c - p)
        x = np.linalg.lstsq(a, rhs, rcond=1e-10)[0]
        r = Rotation.from_rotvec(x[:3]).as_matrix()
        trial = p @ r.T + x[3:]
        c2, f2, d22 = target_index.query(trial)
        e2 = float(d22.mean())
        if not e2 < err:
            r, t = _kabsch(p, c)
            trial = p @ r.T + t
            c2, f2, d22 = target_index.query(trial)
            e2 = float(d22.mean())
            if not e2 < err:
                break
        done = err - e2 <= tol * err
        p, c, f, err = trial, c2, f2, e2
        if done:
            break
    return p


def _fit_rotations(S):
    """Per-vertex rotations maximising tr(R S) with reflection fix."""
    return kernels.fit_rotations(S)


class _ArapSystem:
    """Rest-shape data shared by all iterations of one registration."""

    def __init__(self, rest: TriMesh):
        self.rest = rest
        adj = rest.adjacency
        self.indptr = adj.indptr.astype(np.int64)
        self.indices = adj.indices.astype(np.int64)
        self.src = np.repeat(np.arange(rest.n), np.diff(self.indptr))
        self.e = rest.vertices[self.src] - rest.vertices[self.indices]
        self.lap = graph_laplacian(rest)

    def rotations(self, cur):
        return _fit_rotations(kernels.ring_covariance(self.indptr, self.indices, self.rest.vertices, cur))

    def rhs(self, R):
        out = np.zeros((self.rest.n, 3))
        np.add.at(out, self.src, np.einsum("eij,ej->ei", R[self.src] + R[self.indices], self.e))
        return out

    def energy(self, cur, R=None):
        if R is None:
            R = self.rotations(cur)
        res = (cur[self.src] - cur[self.indices]) - np.einsum("eij,ej->ei", R[self.src], self.e)
        return float(np.sum(res * res))


def arap_deformation_energy(rest: TriMesh, deformed_vertices) -> float:
    """Sum over directed edges of |(p_i - p_j) - R_i (g_i - g_j)|^2 with optimal R_i."""
    return _ArapSystem(rest).energy(np.asarray(deformed_vertices, dtype=np.float64))


def register_arap(source: TriMesh, target: TriMesh, config: RegistrationConfig | None = None,
                  rest: TriMesh | None = None, target_index: SurfaceIndex | None = None) -> RegistrationResult:
    """Deform ``source`` onto ``target`` by local-global ARAP with closest-point data.

    ``rest`` (default: ``source``) defines the undeformed edge vectors;
    ``source`` gives the initial positions.
    """
    cfg = config or RegistrationConfig()
    rest = source if rest is None else rest
    if rest.n != source.n:
        raise ValueError("rest and source must share topology")
    tindex = target_index or SurfaceIndex(target)
    tnormals = target.face_normals() if cfg.point_to_plane else None
    sys = _ArapSystem(rest)
    n = source.n
    w = float(cfg.w_data)
    p = np.array(source.vertices, dtype=np.float64)
    if cfg.rigid_init:
        p = rigid_icp(p, tindex, cfg.rigid_iters)
    lu = None
    if not cfg.point_to_plane:
        lu = splu(sparse.csc_matrix(2.0 * sys.lap + w * sparse.eye(n)))

    def evaluate(p):
        # closest points and rotations at p, reused by the next global step
        c, fidx, d2 = tindex.query(p)
        R = sys.rotations(p)
        arap = sys.energy(p, R)
        return (arap, float(d2.mean()), arap + w * float(d2.sum())), (c, fidx, R)

    def step(state):
        c, fidx, R = state
        b = sys.rhs(R)
        if not cfg.point_to_plane:
            return lu.solve(b + w * c)
        nrm = tnormals[fidx]
        nn = np.einsum("ni,nj->nij", nrm, nrm)
        blocks = sparse.block_diag(list(nn), format="csr")
        a = sparse.kron(2.0 * sys.lap, sparse.eye(3)) + w * blocks + 1e-8 * w * sparse.eye(3 * n)
        rhs = b.ravel() + w * np.einsum("nij,nj->ni", nn, c).ravel() + 1e-8 * w * c.ravel()
        return splu(sparse.csc_matrix(a)).solve(rhs).reshape(n, 3)

    # absolute floor so exact fits stop instead of chasing rounding noise
    atol = 1e-12 * max(rest.bbox_diagonal(), target.bbox_diagonal()) ** 2
    history = []
    best = None
    increases = 0
    converged = diverged = False
    e, state = evaluate(p)
    prev_total = e[2]
    xs, gs = [], []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        plain = step(state)
        cand = plain
        e, state = evaluate(plain)
        if cfg.anderson > 0:
            xs.append(p.ravel())
            gs.append(plain.ravel() - p.ravel())
            del xs[:-cfg.anderson - 1], gs[:-cfg.anderson - 1]
            if len(gs) > 1:
                dg = np.diff(np.array(gs), axis=0).T
                dx = np.diff(np.array(xs), axis=0).T
                gam = np.linalg.lstsq(dg, gs[-1], rcond=1e-12)[0]
                acc = (plain.ravel() - (dx + dg) @ gam).reshape(n, 3)
                if np.all(np.isfinite(acc)):
                    ea, sa = evaluate(acc)
                    if ea[2] < e[2]:
                        cand, e, state = acc, ea, sa
                    else:
                        xs, gs = [], []
        p = cand
        arap, data, total = e
        history.append((arap, data))
        if not np.isfinite(total):
            diverged = True
            break
        if best is None or total < best[0]:
            best = (total, p.copy(), arap, data)
        if total > prev_total:
            increases += 1
            if increases >= cfg.divergence_patience:
                diverged = True
                break
        else:
            increases = 0
        if len(history) > 1:
            (a0, d0), (a1, d1) = history[-2], history[-1]
            if (abs(a1 - a0) <= cfg.tol * abs(a0) + atol) and (abs(d1 - d0) <= cfg.tol * abs(d0) + atol):
                converged = True
                break
        prev_total = total
    if (diverged or not np.isfinite(history[-1][0] + history[-1][1])) and best is not None:
        _, p, arap, data = best
    else:
        arap, data = history[-1]
    return RegistrationResult(source.with_vertices(p), data, arap, it, history, converged, diverged)


def register_along_path(template: TriMesh, gen, z_temp, z_target, T=10, grid=None,
                        config: RegistrationConfig | None = None, simplify_target=None,
                        final_target: TriMesh | None = None, extract=None) -> RegistrationResult:
    """Register ``template`` through the level sets of ``latent_path(z_temp, z_target, T)``.

    Each step registers the previous result (used as both rest shape and
    initial guess) to the next extracted mesh; the last step targets
    ``final_target`` or the extracted z_target level set.  ``extract`` may
    replace the default marching-cubes extraction ``extract(z) -> TriMesh``.
    """
    cfg = config or RegistrationConfig()
    zt = np.asarray(z_temp, dtype=np.float64).ravel()
    zg = np.asarray(z_target, dtype=np.float64).ravel()
    if extract is None:
        if grid is None:
            raise ValueError("need a grid or an extract function")
        from .marching import marching_cubes_with_info
        from .simplify import simplify

        def extract(z):
            mesh, _ = marching_cubes_with_info(gen, z, grid)
            return simplify(mesh, simplify_target) if simplify_target else mesh

    if np.array_equal(zt, zg) and final_target is None:
        return RegistrationResult(template, 0.0, 0.0, 0, [], True, False, [])
    codes = latent_path(zt, zg, T)
    current = template
    steps = []
    diverged = False
    last = None
    # later steps start from an already aligned shape
    step_cfg = RegistrationConfig(**{**cfg.__dict__, "rigid_init": False})
    for j, z in enumerate(codes, start=1):
        try:
            target = extract(z)
        except EmptySurfaceError as exc:
            raise EmptySurfaceError(f"intermediate step {j} of {T}: {exc}") from exc
        last = register_arap(current, target, cfg if j == 1 else step_cfg, rest=current)
        steps.append(last.data_residual)
        diverged |= last.diverged
        current = last.deformed
    if final_target is None:
        try:
            final_target = extract(zg)
        except EmptySurfaceError as exc:
            raise EmptySurfaceError(f"final step: {exc}") from exc
    last = register_arap(current, final_target, cfg if not codes else step_cfg, rest=current)
    steps.append(last.data_residual)
    last.diverged |= diverged
    last.step_residuals = steps
    return last


def edge_distortion(mapped, source: TriMesh, return_skipped=False):
    """Mean squared relative stretch of the mapped edges.

    ``mapped`` holds the image of every source vertex.  Zero-length source
    edges are skipped.
    """
    q = np.asarray(mapped, dtype=np.float64).reshape(-1, 3)
    if q.shape[0] != source.n:
        raise ValueError("correspondence must map every source vertex")
    e = source.edges
    ls = np.linalg.norm(source.vertices[e[:, 0]] - source.vertices[e[:, 1]], axis=1)
    lm = np.linalg.norm(q[e[:, 0]] - q[e[:, 1]], axis=1)
    ok = ls > 0
    skipped = int((~ok).sum())
    val = float(np.mean(((lm[ok] - ls[ok]) / ls[ok]) ** 2)) if ok.any() else 0.0
    return (val, skipped) if return_skipped else val


# ---------------------------------------------------------------- shape graph

@dataclass
class ShapeGraph:
    codes: np.ndarray
    K: int
    template: int = 0
    edges: list = field(default_factory=list)          # sorted (i, j) with i < j
    weights: dict = field(default_factory=dict)        # (i, j) -> distortion
    paths: dict = field(default_factory=dict)          # node -> list of nodes from template

    @property
    def n_nodes(self):
        return self.codes.shape[0]

    def neighbors(self, i):
        out = []
        for a, b in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)

    def weight(self, i, j):
        return self.weights[(min(i, j), max(i, j))]

    def to_dict(self):
        return {
            "K": self.K,
            "template": self.template,
            "nodes": [{"id": i, "code": self.codes[i].tolist()} for i in range(self.n_nodes)],
            "edges": [{"i": a, "j": b, "weight": self.weights.get((a, b))} for a, b in self.edges],
            "paths": {str(k): v for k, v in sorted(self.paths.items())},
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        codes = np.array([n["code"] for n in sorted(data["nodes"], key=lambda n: n["id"])], dtype=np.float64)
        g = cls(codes, int(data["K"]), int(data.get("template", 0)))
        for e in data["edges"]:
            key = (min(e["i"], e["j"]), max(e["i"], e["j"]))
            g.edges.append(key)
            if e.get("weight") is not None:
                g.weights[key] = float(e["weight"])
        g.edges.sort()
        g.paths = {int(k): list(v) for k, v in data.get("paths", {}).items()}
        return g


def build_shape_graph(codes, K, template=0) -> ShapeGraph:
    """K nearest neighbours in latent space, symmetrised by union.

    Ties in distance go to the lower index.
    """
    z = np.asarray(codes, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    n = z.shape[0]
    if n < 2:
        raise GraphError("need at least two shapes")
    if not 1 <= K < n:
        raise GraphError(f"K must be in [1, {n - 1}], got {K}")
    d = np.linalg.norm(z[:, None, :] - z[None, :, :], axis=2)
    edges = set()
    for i in range(n):
        order = [j for j in np.argsort(d[i], kind="stable") if j != i][:K]
        for j in order:
            edges.add((min(i, int(j)), max(i, int(j))))
    return ShapeGraph(z, int(K), int(template), sorted(edges))


def register_graph_edges(graph: ShapeGraph, deformed, shapes, config=None, workers=1):
    """Register ``deformed[i]`` onto ``shapes[j]`` along both directions of every edge.

    Returns ``{(i, j): (n_template, 3) positions}`` and fills
    ``graph.weights`` with the mean distortion of the two directions.
    """
    cfg = config or RegistrationConfig(rigid_init=False)
    jobs = []
    for a, b in graph.edges:
        jobs += [(a, b), (b, a)]
    indices = {}

    def index_of(j):
        if j not in indices:
            indices[j] = SurfaceIndex(shapes[j])
        return indices[j]

    for _, j in jobs:
        index_of(j)

    def run(job):
        i, j = job
        res = register_arap(deformed[i], shapes[j], cfg, target_index=indices[j])
        return res.deformed.vertices

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(run, jobs))
    else:
        out = [run(job) for job in jobs]
    results = dict(zip(jobs, out))
    for a, b in graph.edges:
        w1 = edge_distortion(results[(a, b)], deformed[a])
        w2 = edge_distortion(results[(b, a)], deformed[b])
        graph.weights[(a, b)] = 0.5 * (w1 + w2)
    return results


def shortest_paths(graph: ShapeGraph):
    """Dijkstra from the template; returns {node: path}; lower index wins ties."""
    n = graph.n_nodes
    adj = {i: [] for i in range(n)}
    for a, b in graph.edges:
        if (a, b) not in graph.weights:
            raise GraphError(f"edge ({a}, {b}) has no weight")
        w = graph.weights[(a, b)]
        if w < 0:
            raise GraphError("negative edge weight")
        adj[a].append((b, w))
        adj[b].append((a, w))
    dist = {graph.template: 0.0}
    prev = {}
    heap = [(0.0, graph.template)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v, w in sorted(adj[u]):
            nd = d + w
            if v not in dist or nd < dist[v]:
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    unreachable = [i for i in range(n) if i not in done]
    if unreachable:
        raise GraphError(f"shapes unreachable from template {graph.template}: {unreachable}", unreachable)
    paths = {}
    for v in range(n):
        path = [v]
        while path[-1] != graph.template:
            path.append(prev[path[-1]])
        paths[v] = path[::-1]
    graph.paths = paths
    return paths


def propagate_correspondences(graph: ShapeGraph, edge_results, deformed):
    """Compose edge registrations along shortest paths from the template.

    At each hop a position on shape a is snapped to the nearest vertex k
    of ``deformed[a]`` and replaced by ``edge_results[(a, b)][k]``.
    Returns {node: (n_template, 3) positions}.
    """
    paths = shortest_paths(graph)
    start = np.asarray(deformed[graph.template].vertices, dtype=np.float64)
    indices = {}
    out = {}
    for v in range(graph.n_nodes):
        pos = start
        path = paths[v]
        for a, b in zip(path[:-1], path[1:]):
            if a not in indices:
                indices[a] = PointIndex(deformed[a].vertices)
            k, _ = indices[a].query(pos)
            pos = np.asarray(edge_results[(a, b)])[k]
        out[v] = np.array(pos)
    return out
