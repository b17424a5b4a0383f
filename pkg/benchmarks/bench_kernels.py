"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--level 4] [--grid 64] [--repeat 5]

Prints one line per kernel (build_acap times the whole assembly around the
scatter kernel) with the best-of-N time of each backend and the
speedup.  Outputs are compared as a sanity check before timing.
"""
import argparse
import time

import numpy as np

from jointcorr import kernels
from jointcorr.deform import build_acap
from jointcorr.implicit import EllipsoidGenerator, VoxelGrid
from jointcorr.mesh import icosphere
from jointcorr.spatial import SurfaceIndex


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(level, grid):
    rng = np.random.default_rng(0)
    mesh = icosphere(level)
    mesh = mesh.with_vertices(mesh.vertices * [1.0, 0.8, 0.6] + 0.01 * rng.standard_normal(mesh.vertices.shape))
    adj = mesh.adjacency
    cur = mesh.vertices + 0.05 * rng.standard_normal(mesh.vertices.shape)
    S = kernels.ring_covariance(adj.indptr, adj.indices, mesh.vertices, cur)
    g = VoxelGrid.from_bounds([-1.4] * 3, [1.4] * 3, grid)
    field = EllipsoidGenerator().value(g.points(), np.zeros(3)).reshape(g.dims)
    q = 1.2 * rng.standard_normal((20 * mesh.n, 3))
    return {
        "mc_triangles": lambda b: kernels.mc_triangles(field, backend=b),
        "build_acap": lambda b: build_acap(mesh, backend=b).matrix,
        "ring_covariance": lambda b: kernels.ring_covariance(adj.indptr, adj.indices, mesh.vertices, cur,
                                                             backend=b),
        "fit_rotations": lambda b: kernels.fit_rotations(S, backend=b),
        "closest_on_mesh": lambda b: SurfaceIndex(mesh, backend=b).query(q)[2],
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--level", type=int, default=4, help="icosphere subdivision level")
    ap.add_argument("--grid", type=int, default=64, help="marching-cubes samples per axis")
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled kernels not available; nothing to compare")
        return 1
    print(f"{'kernel':<18}{'python [ms]':>14}{'cython [ms]':>14}{'speedup':>10}")
    for name, fn in cases(a.level, a.grid).items():
        out_p, out_c = fn("python"), fn("cython")
        if hasattr(out_p, "toarray"):
            out_p, out_c = out_p.toarray(), out_c.toarray()
        if not np.allclose(out_p, out_c, rtol=1e-10, atol=1e-12):
            print(f"{name}: backends disagree")
        tp = best_of(lambda: fn("python"), a.repeat)
        tc = best_of(lambda: fn("cython"), a.repeat)
        print(f"{name:<18}{1e3 * tp:>14.2f}{1e3 * tc:>14.2f}{tp / tc:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
