"""Command-line interface: ``jointcorr <subcommand> ...``.

Every subcommand accepts ``--config file.json``; keys in that file set
defaults for the matching flags and explicit flags override them.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import GraphError, StageError


def _floats(text):
    return [float(t) for t in text.replace(",", " ").split()]


def _add_numeric_knobs(p):
    p.add_argument("--epsilon", type=float, help="finite step for induced displacements")
    p.add_argument("--mu", type=float, help="KKT regularization (default: scaled to trace(L))")
    p.add_argument("--alpha", type=float, help="ARAP weight in the combined energy")
    p.add_argument("--eps-cyc", type=float, dest="eps_cyc", help="finite step for the cycle residual")
    p.add_argument("--trace-mode", dest="trace_mode", help="auto | exact | hutchinson[:m]")


def build_parser():
    ap = argparse.ArgumentParser(prog="jointcorr", description="Joint shape correspondence toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with flag defaults")
        return p

    p = cmd("synth", "generate a synthetic collection with ground truth")
    p.add_argument("--family", default="bent-capsule")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = cmd("energy-check", "assemble a deformation form and compare with the per-vertex oracle")
    p.add_argument("--mesh", required=True)
    p.add_argument("--kind", default="combined", choices=["arap", "acap", "combined"])
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--fields", type=int, default=5, help="random displacement fields to test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mtx", help="write the matrix in Matrix Market format")

    p = cmd("correspond", "induced displacement of a level-set mesh for a latent direction")
    p.add_argument("--generator", required=True, help="generator JSON description")
    p.add_argument("--code", required=True, type=_floats)
    p.add_argument("--direction", required=True, type=_floats)
    p.add_argument("--mesh", help="discretized level set (default: extract on --bounds)")
    p.add_argument("--bounds", type=_floats, help="xmin ymin zmin xmax ymax zmax")
    p.add_argument("--grid-dims", dest="grid_dims", type=_floats, default=[64, 64, 64])
    p.add_argument("--simplify", type=int, default=2000)
    p.add_argument("--out", required=True, help="output PLY of the displaced mesh")
    _add_numeric_knobs(p)

    p = cmd("interpolate", "extract level sets along a latent path")
    p.add_argument("--generator", required=True)
    p.add_argument("--z-start", dest="z_start", required=True, type=_floats)
    p.add_argument("--z-end", dest="z_end", required=True, type=_floats)
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--bounds", required=True, type=_floats)
    p.add_argument("--grid-dims", dest="grid_dims", type=_floats, default=[64, 64, 64])
    p.add_argument("--simplify", type=int, default=0)
    p.add_argument("--out", required=True)

    p = cmd("register", "ARAP registration of a template mesh to a target mesh")
    p.add_argument("--template", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--w-data", dest="w_data", type=float, default=1.0)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--no-rigid-init", dest="rigid_init", action="store_false")
    p.add_argument("--point-to-plane", dest="point_to_plane", action="store_true")
    p.add_argument("--out", required=True, help="deformed template PLY")
    p.add_argument("--corr", help="write template->target vertex correspondences")

    p = cmd("propagate", "interpolation-guided registration of the template to every shape")
    p.add_argument("--manifest", required=True)
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--grid-dims", dest="grid_dims", type=_floats, default=[64, 77, 64])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = cmd("graph", "shape graph construction and correspondence propagation")
    gsub = p.add_subparsers(dest="graph_command", required=True)
    gb = gsub.add_parser("build", help="K-NN graph with registration distortion weights")
    gb.add_argument("--config")
    gb.add_argument("--manifest", required=True)
    gb.add_argument("--deformed", required=True, help="directory of deformed templates from `propagate`")
    gb.add_argument("--K", type=int, default=25)
    gb.add_argument("--workers", type=int, default=1)
    gb.add_argument("--out", required=True, help="output directory (graph.json, edges.npz)")
    gp = gsub.add_parser("propagate", help="compose edge registrations along shortest paths")
    gp.add_argument("--config")
    gp.add_argument("--manifest", required=True)
    gp.add_argument("--graph", required=True, help="directory written by `graph build`")
    gp.add_argument("--deformed", required=True)
    gp.add_argument("--out", required=True)

    p = cmd("refine", "joint refinement of deformed templates")
    p.add_argument("--manifest", required=True)
    p.add_argument("--deformed", required=True)
    p.add_argument("--lambda-d", dest="lambda_d", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--step-size", dest="step_size", type=float, default=0.25)
    p.add_argument("--rebuild-every", dest="rebuild_every", type=int, default=10)
    p.add_argument("--samples", type=int, default=3000)
    p.add_argument("--K", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = cmd("evaluate", "geodesic error of predicted correspondences against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True, help="directory of <shape>.corr or <shape>.ply predictions")
    p.add_argument("--errors-out", dest="errors_out", help="write colour-coded error PLYs here")
    p.add_argument("--vmax", type=float, default=0.15)

    p = cmd("pipeline", "run the full three-stage pipeline")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--manifest")
    p.add_argument("--family")
    p.add_argument("--count", type=int)
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--T", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--lambda-geo", dest="lambda_geo", type=float)
    p.add_argument("--lambda-cyc", dest="lambda_cyc", type=float)
    p.add_argument("--lambda-d", dest="lambda_d", type=float)
    p.add_argument("--grid-dims", dest="grid_dims", type=_floats)
    p.add_argument("--simplify-target", dest="simplify_target", type=int)
    p.add_argument("--refine-steps", dest="refine_steps", type=int)
    p.add_argument("--skip-stage1", dest="stage1", action="store_const", const=False)
    p.add_argument("--skip-stage3", dest="stage3", action="store_const", const=False)
    p.add_argument("--skip-baseline", dest="baseline", action="store_const", const=False)
    p.add_argument("--workers", type=int, default=1)
    _add_numeric_knobs(p)
    return ap


def _subparser(ap, args):
    p = ap._subparsers._group_actions[0].choices[args.command]
    if args.command == "graph":
        p = p._subparsers._group_actions[0].choices[args.graph_command]
    return p


def parse_args(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = json.load(fh)
        p = _subparser(ap, args)
        dests = {a.dest for a in p._actions}
        unknown = set(cfg) - dests
        if unknown:
            ap.error(f"unknown keys in {args.config}: {', '.join(sorted(unknown))}")
        p.set_defaults(**cfg)
        args = ap.parse_args(argv)
    return args


def _gen(path):
    from .implicit import generator_from_config
    with open(path) as fh:
        return generator_from_config(json.load(fh))


def _grid(bounds, dims):
    from .implicit import VoxelGrid
    b = np.asarray(bounds, dtype=np.float64)
    if b.size != 6:
        raise SystemExit("--bounds needs 6 numbers")
    return VoxelGrid.from_bounds(b[:3], b[3:], [int(d) for d in dims])


def _load_deformed(coll, d):
    from .meshio import load_mesh
    out = []
    for k, name in enumerate(coll.names):
        p = os.path.join(d, f"{name}.ply")
        out.append(load_mesh(p) if os.path.exists(p) else coll.meshes[coll.template])
    return out


def _write_corr_dir(coll, positions, d):
    from .meshio import write_correspondences
    from .spatial import PointIndex
    os.makedirs(d, exist_ok=True)
    for k, pos in positions.items():
        idx, _ = PointIndex(coll.meshes[k].vertices).query(pos)
        write_correspondences(np.stack([np.arange(idx.size), idx], axis=1),
                              os.path.join(d, f"{coll.names[k]}.corr"), binary=True)


def cmd_synth(a):
    from .synth import synth_collection
    coll = synth_collection(a.family, a.count, a.seed)
    print(coll.save(a.out))


def cmd_energy_check(a):
    from .deform import _oracle, build_form
    from .meshio import load_mesh
    mesh = load_mesh(a.mesh)
    form = build_form(mesh, a.kind, a.alpha)
    rng = np.random.default_rng(a.seed)
    worst = 0.0
    for _ in range(a.fields):
        d = rng.standard_normal(3 * mesh.n)
        if a.kind == "combined":
            ref = a.alpha * _oracle(mesh, d, None, "arap") + _oracle(mesh, d, None, "acap")
        else:
            ref = _oracle(mesh, d, None, a.kind)
        e = form.energy(d)
        worst = max(worst, abs(e - ref) / max(abs(ref), 1e-300))
    print(json.dumps({"kind": a.kind, "vertices": mesh.n, "max_relative_error": worst,
                      "diagnostics": {k: v for k, v in form.diagnostics.items() if np.isscalar(v)}}, sort_keys=True))
    if a.mtx:
        form.save_mtx(a.mtx)


def cmd_correspond(a):
    from .deform import build_combined
    from .induced import DEFAULT_EPSILON, build_constraints, solve_displacement
    from .marching import marching_cubes
    from .meshio import load_mesh, save_mesh
    from .simplify import simplify
    gen = _gen(a.generator)
    if a.mesh:
        mesh = load_mesh(a.mesh)
    else:
        if not a.bounds:
            raise SystemExit("need --mesh or --bounds")
        mesh = marching_cubes(gen, a.code, _grid(a.bounds, a.grid_dims))
        if a.simplify:
            mesh = simplify(mesh, a.simplify)
    L = build_combined(mesh, 10.0 if a.alpha is None else a.alpha)
    cs = build_constraints(gen, mesh, a.code)
    eps = DEFAULT_EPSILON if a.epsilon is None else a.epsilon
    fld = solve_displacement(L, cs, a.direction, eps, mu=a.mu)
    save_mesh(mesh.with_vertices(mesh.vertices + fld.displacements), a.out)
    print(json.dumps({k: v for k, v in fld.diagnostics.items() if np.isscalar(v)}, sort_keys=True))


def cmd_interpolate(a):
    from .implicit import latent_path
    from .marching import marching_cubes
    from .meshio import save_mesh
    from .simplify import simplify
    gen = _gen(a.generator)
    grid = _grid(a.bounds, a.grid_dims)
    os.makedirs(a.out, exist_ok=True)
    codes = [np.asarray(a.z_start)] + latent_path(a.z_start, a.z_end, a.T) + [np.asarray(a.z_end)]
    for j, z in enumerate(codes):
        mesh = marching_cubes(gen, z, grid)
        if a.simplify:
            mesh = simplify(mesh, a.simplify)
        p = os.path.join(a.out, f"step_{j:03d}.ply")
        save_mesh(mesh, p)
        print(p)


def cmd_register(a):
    from .meshio import load_mesh, save_mesh, write_correspondences
    from .registration import RegistrationConfig, register_arap
    from .spatial import PointIndex
    src, tgt = load_mesh(a.template), load_mesh(a.target)
    cfg = RegistrationConfig(w_data=a.w_data, max_iters=a.max_iters, tol=a.tol, rigid_init=a.rigid_init,
                             point_to_plane=a.point_to_plane)
    res = register_arap(src, tgt, cfg)
    save_mesh(res.deformed, a.out)
    if a.corr:
        idx, _ = PointIndex(tgt.vertices).query(res.deformed.vertices)
        write_correspondences(np.stack([np.arange(idx.size), idx], axis=1), a.corr)
    print(json.dumps({"data_residual": res.data_residual, "arap_energy": res.arap_energy,
                      "iterations": res.iterations, "converged": res.converged, "diverged": res.diverged}))


def cmd_propagate(a):
    from concurrent.futures import ThreadPoolExecutor
    from .meshio import save_mesh
    from .registration import register_along_path
    from .synth import load_collection
    coll = load_collection(a.manifest)
    grid = coll.grid([int(d) for d in a.grid_dims])
    t = coll.template
    others = [k for k in range(len(coll.meshes)) if k != t]

    def job(k):
        return register_along_path(coll.meshes[t], coll.generator, coll.codes[t], coll.codes[k], a.T, grid,
                                   final_target=coll.meshes[k])

    with ThreadPoolExecutor(max_workers=max(a.workers, 1)) as pool:
        res = list(pool.map(job, others))
    os.makedirs(a.out, exist_ok=True)
    pos = {}
    for k, r in zip(others, res):
        save_mesh(r.deformed, os.path.join(a.out, f"{coll.names[k]}.ply"))
        pos[k] = r.deformed.vertices
        print(f"{coll.names[k]}: residual {r.data_residual:.3e}")
    save_mesh(coll.meshes[t], os.path.join(a.out, f"{coll.names[t]}.ply"))
    _write_corr_dir(coll, pos, os.path.join(a.out, "correspondences"))


def cmd_graph(a):
    from .registration import ShapeGraph, build_shape_graph, propagate_correspondences, register_graph_edges
    from .synth import load_collection
    coll = load_collection(a.manifest)
    deformed = _load_deformed(coll, a.deformed)
    if a.graph_command == "build":
        g = build_shape_graph(coll.codes, min(a.K, len(coll.meshes) - 1), coll.template)
        edges = register_graph_edges(g, deformed, coll.meshes, workers=a.workers)
        os.makedirs(a.out, exist_ok=True)
        g.save(os.path.join(a.out, "graph.json"))
        np.savez(os.path.join(a.out, "edges.npz"), **{f"{i}_{j}": v for (i, j), v in edges.items()})
        print(os.path.join(a.out, "graph.json"))
        return
    with open(os.path.join(a.graph, "graph.json")) as fh:
        g = ShapeGraph.from_dict(json.load(fh))
    with np.load(os.path.join(a.graph, "edges.npz")) as z:
        edges = {tuple(int(t) for t in k.split("_")): z[k] for k in z.files}
    pos = propagate_correspondences(g, edges, deformed)
    g.save(os.path.join(a.graph, "graph.json"))
    _write_corr_dir(coll, {k: v for k, v in pos.items() if k != coll.template}, a.out)
    print(a.out)


def cmd_refine(a):
    from .refine import init_generator, refine, save_refined
    from .registration import build_shape_graph
    from .synth import load_collection
    coll = load_collection(a.manifest)
    deformed = _load_deformed(coll, a.deformed)
    rng = np.random.default_rng(a.seed)
    targets = [m.sample_surface(a.samples, rng) for m in coll.meshes]
    g = build_shape_graph(coll.codes, min(a.K, len(coll.meshes) - 1), coll.template)
    gen = init_generator(deformed, coll.codes, g)
    out, trace = refine(gen, targets, a.lambda_d, a.steps, a.step_size, a.rebuild_every)
    save_refined(out, a.out, coll.names)
    trace.write_csv(os.path.join(a.out, "loss.csv"))
    _write_corr_dir(coll, {k: out.vertex_sets[k] for k in range(len(coll.meshes)) if k != coll.template},
                    os.path.join(a.out, "correspondences"))
    print(json.dumps({"initial_total": trace.rows[0][3], "final_total": trace.rows[-1][3]}))


def cmd_evaluate(a):
    from .meshio import load_mesh, read_correspondences
    from .metrics import eval_correspondences, export_error_field
    from .synth import load_collection
    coll = load_collection(a.manifest)
    t = coll.template
    preds, gts, targets, ks = [], [], [], []
    for k, name in enumerate(coll.names):
        if k == t:
            continue
        cp = os.path.join(a.pred, f"{name}.corr")
        pp = os.path.join(a.pred, f"{name}.ply")
        if os.path.exists(cp):
            pairs = read_correspondences(cp)
            pred = np.full(coll.meshes[t].n, -1, dtype=np.int64)
            pred[pairs[:, 0]] = pairs[:, 1]
            if np.any(pred < 0):
                raise SystemExit(f"{cp}: correspondences do not cover every template vertex")
        elif os.path.exists(pp):
            pred = load_mesh(pp).vertices
        else:
            raise SystemExit(f"no prediction for {name} in {a.pred}")
        preds.append(pred)
        gts.append(np.arange(coll.meshes[t].n))
        targets.append(coll.meshes[k])
        ks.append(k)
    m = eval_correspondences(preds, gts, targets, coll.scale)
    if a.errors_out:
        os.makedirs(a.errors_out, exist_ok=True)
        for k, e in zip(ks, m.per_vertex):
            export_error_field(e, coll.meshes[k], os.path.join(a.errors_out, f"{coll.names[k]}.ply"), a.vmax)
    print(json.dumps(m.to_dict(), sort_keys=True))


def cmd_pipeline(a):
    from .pipeline import PipelineConfig, dumps_report, run_pipeline
    keys = {f for f in PipelineConfig.__dataclass_fields__}
    cfg = {k: v for k, v in vars(a).items() if k in keys and v is not None}
    if "grid_dims" in cfg:
        cfg["grid_dims"] = tuple(int(d) for d in cfg["grid_dims"])
    res = run_pipeline(PipelineConfig(**cfg), workers=a.workers)
    if not a.output_dir:
        sys.stdout.write(dumps_report(res.report))
    else:
        print(os.path.join(a.output_dir, "report.json"))


COMMANDS = {"synth": cmd_synth, "energy-check": cmd_energy_check, "correspond": cmd_correspond,
            "interpolate": cmd_interpolate, "register": cmd_register, "propagate": cmd_propagate,
            "graph": cmd_graph, "refine": cmd_refine, "evaluate": cmd_evaluate, "pipeline": cmd_pipeline}


def main(argv=None):
    args = parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (StageError, GraphError, ValueError, OSError) as exc:
        print(f"jointcorr {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
