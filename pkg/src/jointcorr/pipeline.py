"""Three-stage correspondence pipeline driver.

Stage I evaluates the implicit generator's regularizers at sampled codes,
Stage II deforms the template onto every shape along latent interpolation
paths (with the shape graph as fallback), Stage III jointly refines the
deformed templates, and the result is scored against ground truth.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .deform import build_combined
from .errors import StageError
from .implicit import HUMAN_GRID_DIMS
from .induced import (DEFAULT_EPS_CYC, DEFAULT_EPSILON, build_constraints, cycle_residual, r_geo)
from .marching import marching_cubes_with_info
from .meshio import write_correspondences
from .metrics import DEFAULT_VMAX, eval_correspondences, export_error_field
from .refine import DEFAULT_LAMBDA_D, DEFAULT_REBUILD_EVERY, DEFAULT_STEP_SIZE, init_generator, refine, save_refined
from .registration import (DEFAULT_K_HUMAN, FALLBACK_RESIDUAL_FRACTION, RegistrationConfig, build_shape_graph,
                           propagate_correspondences, register_along_path, register_arap, register_graph_edges)
from .simplify import simplify
from .spatial import PointIndex
from .synth import load_collection, synth_collection

REPORT_SCHEMA = "jointcorr-report/1"
STAGE_SEEDS = {"stage1": 1, "stage3": 3}


@dataclass
class PipelineConfig:
    seed: int
    manifest: str | None = None
    output_dir: str | None = None
    family: str = "bent-capsule"
    count: int = 10
    stage1: bool = True
    stage2: bool = True
    stage3: bool = True
    baseline: bool = True
    epsilon: float = DEFAULT_EPSILON
    alpha: float = 10.0
    lambda_geo: float = 1e-3
    lambda_cyc: float = 1e-4
    T: int = 10
    K: int = DEFAULT_K_HUMAN
    mu: float | None = None
    eps_cyc: float = DEFAULT_EPS_CYC
    grid_dims: tuple = HUMAN_GRID_DIMS
    simplify_target: int = 2000
    lambda_d: float = DEFAULT_LAMBDA_D
    trace_mode: str = "auto"
    diag_codes: int = 2
    w_data: float = 1.0
    reg_max_iters: int = 100
    fallback_fraction: float = FALLBACK_RESIDUAL_FRACTION
    refine_steps: int = 100
    refine_step_size: float = DEFAULT_STEP_SIZE
    rebuild_every: int = DEFAULT_REBUILD_EVERY
    refine_samples: int = 3000
    error_vmax: float = DEFAULT_VMAX

    def __post_init__(self):
        self.grid_dims = tuple(int(d) for d in np.broadcast_to(np.asarray(self.grid_dims), (3,)))
        for name in ("lambda_geo", "lambda_cyc", "lambda_d", "alpha", "w_data"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.epsilon <= 0 or self.eps_cyc <= 0:
            raise ValueError("epsilon and eps_cyc must be positive")
        if self.mu is not None and self.mu <= 0:
            raise ValueError("mu must be positive")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config keys: {', '.join(sorted(extra))}")
        return cls(**data)

    def to_dict(self):
        d = asdict(self)
        d["grid_dims"] = list(self.grid_dims)
        return d


@dataclass
class PipelineResult:
    report: dict
    predictions: dict = field(default_factory=dict)   # stage -> list of (n, 3) arrays


def stage_rng(seed, stage):
    """Independent generator for a stage, derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STAGE_SEEDS[stage],)))


def _ordered_map(fn, items, workers):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _floats(x):
    """Plain Python floats/lists for JSON."""
    if isinstance(x, dict):
        return {str(k): _floats(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_floats(v) for v in x]
    if isinstance(x, np.ndarray):
        return _floats(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def _metrics(preds, coll, others):
    gt = np.arange(coll.meshes[coll.template].n)
    m = eval_correspondences([preds[k] for k in others], [gt] * len(others),
                             [coll.meshes[k] for k in others], coll.scale)
    return m


def _stage1(cfg, coll, grid, workers):
    rng = stage_rng(cfg.seed, "stage1")
    n = len(coll.meshes)
    picks = sorted(rng.choice(n, size=min(cfg.diag_codes, n), replace=False).tolist())
    out = []
    for k in picks:
        z = coll.codes[k]
        mesh, info = marching_cubes_with_info(coll.generator, z, grid, workers=workers)
        mesh = simplify(mesh, cfg.simplify_target)
        L = build_combined(mesh, cfg.alpha)
        cs = build_constraints(coll.generator, mesh, z)
        rg = r_geo(L, cs, mu=cfg.mu, trace_mode=cfg.trace_mode, rng=rng)
        cyc = [cycle_residual(coll.generator, z, i, cfg.eps_cyc, mesh=mesh, alpha=cfg.alpha, mu=cfg.mu,
                              epsilon=cfg.epsilon) for i in range(z.size)]
        rc = float(np.mean(cyc))
        out.append({"shape": k, "vertices": mesh.n, "clipped": info["clipped"], "r_geo": rg, "r_cyc": rc,
                    "weighted": cfg.lambda_geo * rg + cfg.lambda_cyc * rc})
    return {"codes": out,
            "mean_r_geo": float(np.mean([o["r_geo"] for o in out])),
            "mean_r_cyc": float(np.mean([o["r_cyc"] for o in out]))}


def _stage2(cfg, coll, grid, others, workers):
    template = coll.meshes[coll.template]
    z0 = coll.codes[coll.template]
    rcfg = RegistrationConfig(w_data=cfg.w_data, max_iters=cfg.reg_max_iters)

    def job(k):
        return register_along_path(template, coll.generator, z0, coll.codes[k], cfg.T, grid, rcfg,
                                   final_target=coll.meshes[k])

    results = dict(zip(others, _ordered_map(job, others, workers)))
    deformed = {coll.template: template}
    info = {}
    fallback = []
    for k in others:
        r = results[k]
        deformed[k] = r.deformed
        rms = float(np.sqrt(r.data_residual))
        limit = cfg.fallback_fraction * coll.meshes[k].bbox_diagonal()
        info[str(k)] = {"data_residual": r.data_residual, "arap_energy": r.arap_energy,
                        "max_step_residual": float(max(r.step_residuals)), "diverged": bool(r.diverged)}
        if rms > limit:
            fallback.append(k)
    graph_info = None
    if fallback:
        n = len(coll.meshes)
        graph = build_shape_graph(coll.codes, min(cfg.K, n - 1), coll.template)
        dlist = [deformed[i] for i in range(n)]
        edge_results = register_graph_edges(graph, dlist, coll.meshes, RegistrationConfig(
            w_data=cfg.w_data, max_iters=cfg.reg_max_iters, rigid_init=False), workers)
        prop = propagate_correspondences(graph, edge_results, dlist)
        for k in fallback:
            deformed[k] = template.with_vertices(prop[k])
        graph_info = graph.to_dict()
    preds = {k: deformed[k].vertices for k in deformed}
    return preds, deformed, {"registration": info, "fallback_shapes": fallback, "graph": graph_info}


def _baseline(cfg, coll, others, workers):
    template = coll.meshes[coll.template]
    rcfg = RegistrationConfig(w_data=cfg.w_data, max_iters=cfg.reg_max_iters)
    out = _ordered_map(lambda k: register_arap(template, coll.meshes[k], rcfg).deformed.vertices, others, workers)
    return dict(zip(others, out))


def _stage3(cfg, coll, deformed, workers):
    rng = stage_rng(cfg.seed, "stage3")
    n = len(coll.meshes)
    targets = [coll.meshes[k].sample_surface(cfg.refine_samples, rng) for k in range(n)]
    graph = build_shape_graph(coll.codes, min(cfg.K, n - 1), coll.template)
    gen = init_generator([deformed[k] for k in range(n)], coll.codes, graph)
    refined, trace = refine(gen, targets, cfg.lambda_d, cfg.refine_steps, cfg.refine_step_size,
                            cfg.rebuild_every, workers)
    preds = {k: refined.vertex_sets[k] for k in range(n)}
    ep = [t for _, t in trace.epochs]
    info = {"initial_total": trace.rows[0][3], "final_total": trace.rows[-1][3],
            "initial_chamfer": trace.rows[0][1], "final_chamfer": trace.rows[-1][1],
            "steps": len(trace.rows) - 1, "epochs": len(ep) - 1, "epochs_retried": trace.epochs_retried,
            "epoch_totals_monotone": bool(all(b <= a + 1e-9 for a, b in zip(ep, ep[1:])))}
    return preds, refined, trace, info


def _write_corr(preds, coll, outdir, stage):
    d = os.path.join(outdir, "correspondences", stage)
    os.makedirs(d, exist_ok=True)
    for k, p in sorted(preds.items()):
        idx, _ = PointIndex(coll.meshes[k].vertices).query(p)
        pairs = np.stack([np.arange(idx.size), idx], axis=1)
        write_correspondences(pairs, os.path.join(d, f"{coll.names[k]}.corr"), binary=True)


def write_report(report, path):
    with open(path, "w") as fh:
        fh.write(dumps_report(report))


def dumps_report(report) -> str:
    return json.dumps(_floats(report), indent=1, sort_keys=True) + "\n"


def run_pipeline(cfg: PipelineConfig, workers: int = 1) -> PipelineResult:
    """Run the enabled stages; returns the report and per-stage predictions.

    ``workers`` only sets the thread count for independent per-shape jobs;
    results are gathered in shape order so the report does not depend on it.
    """
    outdir = cfg.output_dir
    if outdir:
        os.makedirs(outdir, exist_ok=True)
    if cfg.manifest:
        coll = load_collection(cfg.manifest)
    else:
        coll = synth_collection(cfg.family, cfg.count, cfg.seed)
    grid = coll.grid(cfg.grid_dims)
    others = [k for k in range(len(coll.meshes)) if k != coll.template]
    report = {"schema": REPORT_SCHEMA, "config": cfg.to_dict(),
              "collection": {"family": coll.family, "count": len(coll.meshes), "template": coll.template,
                             "seed": coll.seed, "scale": coll.scale, "codes": coll.codes},
              "grid": {"origin": list(grid.origin), "spacing": list(grid.spacing), "dims": list(grid.dims)}}
    preds = {}

    def fail(stage, exc):
        report["failed_stage"] = stage
        report["error"] = f"{type(exc).__name__}: {exc}"
        if outdir:
            write_report(report, os.path.join(outdir, "report.json"))
        raise StageError(stage, str(exc)) from exc

    if cfg.stage1:
        try:
            report["stage1"] = _stage1(cfg, coll, grid, workers)
        except Exception as exc:  # noqa: BLE001
            fail("stage1", exc)
    if cfg.baseline:
        try:
            base = _baseline(cfg, coll, others, workers)
            m = _metrics(base, coll, others)
            report["baseline"] = m.to_dict()
            preds["baseline"] = base
        except Exception as exc:  # noqa: BLE001
            fail("baseline", exc)
    deformed = None
    if cfg.stage2:
        try:
            p2, deformed, info = _stage2(cfg, coll, grid, others, workers)
            m = _metrics(p2, coll, others)
            report["stage2"] = {**m.to_dict(), **info}
            preds["stage2"] = p2
            if outdir:
                _write_corr({k: p2[k] for k in others}, coll, outdir, "stage2")
                if info["graph"] is not None:
                    with open(os.path.join(outdir, "graph.json"), "w") as fh:
                        json.dump(_floats(info["graph"]), fh, indent=1, sort_keys=True)
        except Exception as exc:  # noqa: BLE001
            fail("stage2", exc)
    if cfg.stage3:
        if deformed is None:
            fail("stage3", RuntimeError("refinement needs the Stage II result"))
        try:
            p3, refined, trace, info = _stage3(cfg, coll, deformed, workers)
            m = _metrics(p3, coll, others)
            report["stage3"] = {**m.to_dict(), **info}
            preds["stage3"] = p3
            if outdir:
                save_refined(refined, os.path.join(outdir, "refined"), coll.names)
                trace.write_csv(os.path.join(outdir, "refine_loss.csv"))
                _write_corr({k: p3[k] for k in others}, coll, outdir, "stage3")
        except Exception as exc:  # noqa: BLE001
            fail("stage3", exc)
    final = "stage3" if "stage3" in report else ("stage2" if "stage2" in report else None)
    if final:
        report["final"] = {"stage": final, "mean": report[final]["mean"], "median": report[final]["median"]}
        if "baseline" in report and report["baseline"]["mean"] > 0:
            report["final"]["reduction_vs_baseline"] = 1.0 - report[final]["mean"] / report["baseline"]["mean"]
        if outdir:
            m = _metrics(preds[final], coll, others)
            d = os.path.join(outdir, "errors")
            os.makedirs(d, exist_ok=True)
            for k, e in zip(others, m.per_vertex):
                export_error_field(e, coll.meshes[k], os.path.join(d, f"{coll.names[k]}.ply"), cfg.error_vmax)
    if outdir:
        write_report(report, os.path.join(outdir, "report.json"))
    return PipelineResult(report, preds)
