"""Correspondence error metrics and colour-coded error export."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import dijkstra

from .mesh import TriMesh
from .meshio import write_ply
from .spatial import PointIndex, edge_graph

DEFAULT_VMAX = 0.15
# blue -> cyan -> green -> yellow -> red
_ANCHORS = np.array([[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]], dtype=np.float64)
N_BINS = 256


@dataclass
class CorrespondenceMetrics:
    mean: float
    median: float
    per_vertex: list = field(default_factory=list)   # one error array per target shape
    per_shape_mean: list = field(default_factory=list)

    def to_dict(self):
        return {"mean": self.mean, "median": self.median, "per_shape_mean": list(self.per_shape_mean)}


def _as_indices(pred, mesh: TriMesh, index=None):
    a = np.asarray(pred)
    if a.ndim == 1 and np.issubdtype(a.dtype, np.integer):
        if a.size and (a.min() < 0 or a.max() >= mesh.n):
            raise IndexError("predicted vertex index out of range")
        return a.astype(np.int64)
    pts = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    idx, _ = (index or PointIndex(mesh.vertices)).query(pts)
    return idx


def geodesic_errors(pred, gt, mesh: TriMesh) -> np.ndarray:
    """Edge-graph geodesic distance on ``mesh`` between predicted and true points.

    ``pred`` and ``gt`` are vertex indices or 3D points; points are
    snapped to the nearest vertex first.
    """
    index = PointIndex(mesh.vertices)
    p = _as_indices(pred, mesh, index)
    g = _as_indices(gt, mesh, index)
    if p.shape != g.shape:
        raise ValueError(f"prediction covers {p.size} vertices, ground truth {g.size}")
    src, inv = np.unique(g, return_inverse=True)
    dist = dijkstra(edge_graph(mesh), directed=False, indices=src)
    return dist[inv.ravel(), p]


def eval_correspondences(preds, gts, targets, scale=1.0) -> CorrespondenceMetrics:
    """Mean and median geodesic error over all source vertices and target shapes.

    Each of ``preds``/``gts``/``targets`` is a list with one entry per
    target shape; errors are multiplied by ``scale`` (e.g. to report cm).
    """
    if not (len(preds) == len(gts) == len(targets)):
        raise ValueError("preds, gts and targets must have the same length")
    per = [scale * geodesic_errors(p, g, m) for p, g, m in zip(preds, gts, targets)]
    if not per:
        raise ValueError("nothing to evaluate")
    allv = np.concatenate(per)
    return CorrespondenceMetrics(float(np.mean(allv)), float(np.median(allv)), per,
                                 [float(np.mean(e)) for e in per])


def colormap(values, vmax=DEFAULT_VMAX) -> np.ndarray:
    """uint8 RGB colours: values in [0, vmax] quantised to 256 bins, clamped above."""
    if vmax <= 0:
        raise ValueError("vmax must be positive")
    v = np.clip(np.asarray(values, dtype=np.float64) / vmax, 0.0, 1.0)
    b = np.rint(v * (N_BINS - 1)).astype(np.int64)
    return palette()[b]


def palette() -> np.ndarray:
    t = np.linspace(0.0, 1.0, N_BINS) * (len(_ANCHORS) - 1)
    k = np.minimum(t.astype(np.int64), len(_ANCHORS) - 2)
    w = (t - k)[:, None]
    return np.rint((1 - w) * _ANCHORS[k] + w * _ANCHORS[k + 1]).astype(np.uint8)


def decode_colors(colors, vmax=DEFAULT_VMAX) -> np.ndarray:
    """Inverse of :func:`colormap` up to quantisation (nearest palette entry)."""
    c = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    pal = palette().astype(np.float64)
    d = ((c[:, None, :] - pal[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1) / (N_BINS - 1) * vmax


def export_error_field(errors, mesh: TriMesh, path, vmax=DEFAULT_VMAX, binary=True):
    """Write ``mesh`` with per-vertex error colours to a PLY file."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size != mesh.n:
        raise ValueError(f"{e.size} errors for {mesh.n} vertices")
    if np.any(e < 0):
        raise ValueError("errors must be non-negative")
    write_ply(mesh, path, binary=binary, colors=colormap(e, vmax))
