"""Joint refinement of a discrete mesh generator against the input shapes.

The generator is a lookup table: one vertex array per input shape on a
shared template topology, so correspondences stay index-aligned.  The
objective is the mean Chamfer distance to each shape's samples plus a
weighted ACAP regularizer over shape-graph edges.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .deform import build_acap
from .errors import ShapeMismatchError, SolverError
from .mesh import TriMesh
from .meshio import write_ply
from .spatial import chamfer as _chamfer

DEFAULT_LAMBDA_D = 1e-3
DEFAULT_REBUILD_EVERY = 10
DEFAULT_STEP_SIZE = 0.25
MONOTONE_SLACK = 1e-9
MAX_HALVINGS = 40


@dataclass
class DiscreteGenerator:
    faces: np.ndarray
    vertex_sets: list
    codes: np.ndarray
    graph: object = None

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.vertex_sets = [np.array(v, dtype=np.float64) for v in self.vertex_sets]
        n = self.vertex_sets[0].shape[0]
        for i, v in enumerate(self.vertex_sets):
            if v.shape != (n, 3):
                raise ShapeMismatchError(f"vertex set {i} has shape {v.shape}, expected ({n}, 3)")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"vertex set {i} is not finite")

    @property
    def n_shapes(self):
        return len(self.vertex_sets)

    def mesh(self, i) -> TriMesh:
        return TriMesh(self.vertex_sets[i], self.faces)

    def edges(self):
        """Shape-graph edges, or a chain over the shapes when no graph is set."""
        if self.graph is not None:
            return list(self.graph.edges)
        return [(i, i + 1) for i in range(self.n_shapes - 1)]

    def with_vertex_sets(self, vs):
        return DiscreteGenerator(self.faces, vs, self.codes, self.graph)


@dataclass
class RefineLoss:
    chamfer: float
    acap_reg: float
    lambda_d: float
    total: float


@dataclass
class RefineTrace:
    rows: list = field(default_factory=list)   # (step, chamfer, acap_reg, total, epoch)
    step_sizes: list = field(default_factory=list)
    epochs: list = field(default_factory=list)  # (step, total with rebuilt forms)
    epochs_retried: int = 0

    def totals(self):
        return np.array([r[3] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "chamfer", "acap_reg", "total"])
            for step, c, a, t, _ in self.rows:
                w.writerow([step, repr(float(c)), repr(float(a)), repr(float(t))])


def init_generator(deformed, codes, graph=None) -> DiscreteGenerator:
    """Lookup-table generator reproducing the given template deformations exactly."""
    meshes = list(deformed)
    if not meshes:
        raise ValueError("no meshes")
    faces = meshes[0].faces
    for i, m in enumerate(meshes[1:], start=1):
        if m.faces.shape != faces.shape or not np.array_equal(m.faces, faces):
            raise ShapeMismatchError(f"mesh {i} does not share the template topology")
    z = np.asarray(codes, dtype=np.float64)
    if z.shape[0] != len(meshes):
        raise ShapeMismatchError("one latent code per mesh required")
    return DiscreteGenerator(faces, [m.vertices for m in meshes], z, graph)


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance (mean squared closest distances, both ways)."""
    return _chamfer(a, b)


def chamfer_and_grad(a, b, tree_b=None):
    """Chamfer value and its gradient w.r.t. the points ``a`` (hard assignment)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        # propagate so the caller can dump state
        return float("nan"), np.full_like(a, np.nan)
    tree_b = tree_b or cKDTree(b)
    _, ia = tree_b.query(a)
    _, ib = cKDTree(a).query(b)
    da = a - b[ia]
    db = a[ib] - b
    val = float(np.mean(np.einsum("ij,ij->i", da, da)) + np.mean(np.einsum("ij,ij->i", db, db)))
    g = 2.0 * da / a.shape[0]
    np.add.at(g, ib, 2.0 * db / b.shape[0])
    return val, g


def build_forms(gen: DiscreteGenerator, nodes=None):
    """ACAP quadratic forms at the requested shapes (all edge sources by default)."""
    if nodes is None:
        nodes = sorted({i for i, _ in gen.edges()})
    return {i: build_acap(gen.mesh(i)).matrix for i in nodes}


def _reg_and_grad(vs, edges, forms):
    if not edges:
        return 0.0, [np.zeros_like(v) for v in vs]
    grads = [np.zeros_like(v) for v in vs]
    total = 0.0
    for i, j in edges:
        d = (vs[j] - vs[i]).ravel()
        ld = forms[i] @ d
        total += float(d @ ld)
        g = (2.0 * ld).reshape(-1, 3)
        grads[j] += g
        grads[i] -= g
    m = len(edges)
    return total / m, [g / m for g in grads]


def acap_deformation_reg(gen: DiscreteGenerator, forms=None) -> float:
    """Mean over graph edges (i, j) of (m_j - m_i)^T L_acap(m_i) (m_j - m_i)."""
    edges = gen.edges()
    forms = forms or build_forms(gen)
    return _reg_and_grad(gen.vertex_sets, edges, forms)[0]


def objective(vs, targets, trees, edges, forms, lambda_d, workers=1):
    """(RefineLoss, per-shape gradients) with the ACAP forms held fixed."""
    s = len(vs)

    def one(i):
        return chamfer_and_grad(vs[i], targets[i], trees[i])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, range(s)))
    else:
        parts = [one(i) for i in range(s)]
    ch = sum(p[0] for p in parts) / s
    reg, rg = _reg_and_grad(vs, edges, forms) if lambda_d > 0 else (0.0, None)
    grads = []
    for i in range(s):
        g = parts[i][1] / s
        if rg is not None:
            g = g + lambda_d * rg[i]
        grads.append(g)
    if lambda_d == 0:
        reg = _reg_and_grad(vs, edges, forms)[0] if edges else 0.0
    return RefineLoss(ch, reg, lambda_d, ch + lambda_d * reg), grads


def _dump_state(path, vs, grads, step):
    if path is None:
        return None
    os.makedirs(path, exist_ok=True)
    f = os.path.join(path, f"refine_state_step{step}.npz")
    np.savez(f, vertex_sets=np.array(vs), grads=np.array(grads), step=step)
    return f


def _run_epoch(vs, loss, grads, n_steps, eta_max, scale, tg, trees, edges, forms, lambda_d, workers,
               first_step, dump_dir):
    """Up to ``n_steps`` monotone descent steps with fixed forms."""
    rows, sizes = [], []
    eta = eta_max
    for k in range(n_steps):
        step = first_step + k
        if not all(np.all(np.isfinite(g)) for g in grads):
            f = _dump_state(dump_dir, vs, grads, step)
            raise SolverError(f"non-finite gradient at step {step}" + (f"; state written to {f}" if f else ""))
        accepted = False
        for _ in range(MAX_HALVINGS):
            trial = [v - eta * scale * g for v, g in zip(vs, grads)]
            tl, tgd = objective(trial, tg, trees, edges, forms, lambda_d, workers)
            if np.isfinite(tl.total) and tl.total <= loss.total + MONOTONE_SLACK:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            return vs, loss, grads, rows, sizes, True
        vs, loss, grads = trial, tl, tgd
        rows.append((step, loss.chamfer, loss.acap_reg, loss.total))
        sizes.append(eta)
        eta = min(2.0 * eta, eta_max)
    return vs, loss, grads, rows, sizes, False


def refine(gen: DiscreteGenerator, targets, lambda_d=DEFAULT_LAMBDA_D, steps=200,
           step_size=DEFAULT_STEP_SIZE, rebuild_every=DEFAULT_REBUILD_EVERY, workers=1,
           dump_dir=None):
    """Gradient descent on the vertex arrays.

    ``step_size`` is measured in units where 0.25 moves a vertex halfway to
    its closest sample under the forward Chamfer term alone (the raw
    gradient is scaled by vertices-per-shape times shape count).

    Steps are grouped into epochs of ``rebuild_every`` steps with the ACAP
    forms frozen.  Within an epoch a step that would raise the frozen
    total by more than 1e-9 is retried at half the size.  At the end of an
    epoch the forms are rebuilt at the new meshes; if the rebuilt total
    exceeds the one at the start of the epoch, the epoch is rerun from its
    start at half the step size.

    Returns the refined generator and a :class:`RefineTrace` whose
    ``epochs`` list holds ``(step, total)`` evaluated with freshly built
    forms.
    """
    if lambda_d < 0:
        raise ValueError("lambda_d must be non-negative")
    if rebuild_every < 1:
        raise ValueError("rebuild_every must be at least 1")
    tg = [np.asarray(t, dtype=np.float64).reshape(-1, 3) for t in targets]
    if len(tg) != gen.n_shapes:
        raise ShapeMismatchError(f"{len(tg)} target sets for {gen.n_shapes} shapes")
    for i, t in enumerate(tg):
        if t.shape[0] < 100:
            raise ValueError(f"shape {i} has {t.shape[0]} samples; at least 100 required")
        if not np.all(np.isfinite(t)):
            raise ValueError(f"shape {i} has non-finite target samples")
    trees = [cKDTree(t) for t in tg]
    edges = gen.edges()
    rebuild = bool(edges) and lambda_d > 0
    vs = [v.copy() for v in gen.vertex_sets]
    scale = vs[0].shape[0] * len(vs)
    forms = build_forms(gen) if edges else {}
    loss, grads = objective(vs, tg, trees, edges, forms, lambda_d, workers)
    trace = RefineTrace()
    trace.rows.append((0, loss.chamfer, loss.acap_reg, loss.total, 0))
    trace.epochs.append((0, loss.total))
    done = 0
    epoch = 0
    eta = float(step_size)
    while done < steps:
        n = min(rebuild_every, steps - done)
        for _ in range(MAX_HALVINGS):
            nvs, nloss, ngrads, rows, sizes, stalled = _run_epoch(
                vs, loss, grads, n, eta, scale, tg, trees, edges, forms, lambda_d, workers, done + 1, dump_dir)
            if not rebuild or not rows:
                nforms = forms
                break
            nforms = build_forms(gen.with_vertex_sets(nvs))
            nloss, ngrads = objective(nvs, tg, trees, edges, nforms, lambda_d, workers)
            if nloss.total <= loss.total + MONOTONE_SLACK:
                break
            trace.epochs_retried += 1
            eta *= 0.5
        else:
            break
        epoch += 1
        for r in rows:
            trace.rows.append((*r, epoch))
        trace.step_sizes.extend(sizes)
        vs, loss, grads, forms = nvs, nloss, ngrads, nforms
        done += len(rows)
        if rows:
            trace.epochs.append((done, loss.total))
        if stalled or not rows:
            break
    return gen.with_vertex_sets(vs), trace


def save_refined(gen: DiscreteGenerator, outdir, names=None):
    """Write one PLY per shape; returns the paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = []
    for i in range(gen.n_shapes):
        name = names[i] if names else f"shape_{i:03d}"
        p = os.path.join(outdir, f"{name}.ply")
        write_ply(gen.mesh(i), p)
        paths.append(p)
    return paths
