"""Synthetic shape collections with exact ground-truth correspondences.

Every shape is an analytic deformation of one template mesh, so vertex i
of any shape corresponds to vertex i of every other shape.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .implicit import (BentCapsuleGenerator, BumpFieldGenerator, EllipsoidGenerator, SphereGenerator,
                       VoxelGrid, generator_from_config, generator_to_config)
from .mesh import TriMesh, icosphere
from .meshio import load_mesh, write_correspondences, write_ply

FAMILIES = ("sphere-radius", "ellipsoid-axes", "bent-capsule", "bump-field")
MANIFEST_VERSION = 1

CAPSULE_KAPPA = (0.0, 2.0)
CAPSULE_RHO = (0.25, 0.35)
CAPSULE_TEMPLATE_RHO = 0.3


@dataclass
class Collection:
    family: str
    generator: object
    codes: np.ndarray
    meshes: list
    seed: int
    template: int = 0
    scale: float = 1.0

    @property
    def names(self):
        return [f"shape_{i:03d}" for i in range(len(self.meshes))]

    def grid(self, dims, margin=0.15):
        """Voxel grid covering every shape with a relative margin."""
        lo = np.min([m.vertices.min(0) for m in self.meshes], axis=0)
        hi = np.max([m.vertices.max(0) for m in self.meshes], axis=0)
        pad = margin * float(np.linalg.norm(hi - lo))
        return VoxelGrid.from_bounds(lo - pad, hi + pad, dims)

    def manifest(self):
        return {
            "version": MANIFEST_VERSION,
            "family": self.family,
            "seed": self.seed,
            "count": len(self.meshes),
            "template": self.template,
            "scale": self.scale,
            "generator": generator_to_config(self.generator),
            "ground_truth": "vertex-identity",
            "shapes": [{"id": i, "name": n, "mesh": f"{n}.ply", "code": self.codes[i].tolist(),
                        "gt": f"{n}.gt.corr"} for i, n in enumerate(self.names)],
        }

    def save(self, outdir):
        """Write meshes, ground-truth files and ``manifest.json``; returns the manifest path."""
        os.makedirs(outdir, exist_ok=True)
        man = self.manifest()
        ident = np.repeat(np.arange(self.meshes[self.template].n)[:, None], 2, axis=1)
        for entry, mesh in zip(man["shapes"], self.meshes):
            write_ply(mesh, os.path.join(outdir, entry["mesh"]))
            write_correspondences(ident, os.path.join(outdir, entry["gt"]))
        path = os.path.join(outdir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(man, fh, indent=1, sort_keys=True)
        return path


def load_collection(manifest_path) -> Collection:
    with open(manifest_path) as fh:
        man = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    shapes = sorted(man["shapes"], key=lambda s: s["id"])
    meshes = [load_mesh(os.path.join(base, s["mesh"])) for s in shapes]
    codes = np.array([s["code"] for s in shapes], dtype=np.float64)
    return Collection(man["family"], generator_from_config(man["generator"]), codes, meshes,
                      int(man.get("seed", 0)), int(man.get("template", 0)), float(man.get("scale", 1.0)))


def capsule_template(gen: BentCapsuleGenerator, rho=CAPSULE_TEMPLATE_RHO, segments=24, spacing=None) -> TriMesh:
    """Straight capsule (kappa = 0) as rings of ``segments`` vertices with polar caps.

    Rings are spaced evenly along the axis and in latitude over the caps,
    so edges stay short in every direction and survive bending.
    """
    half = 0.5 * gen.length
    h = spacing or 2 * np.pi * rho / segments
    nbody = max(int(np.ceil(gen.length / h)), 1)
    ncap = max(int(np.ceil(0.5 * np.pi * rho / h)), 1)
    rings = []
    for k in range(ncap - 1, 0, -1):
        phi = 0.5 * np.pi * k / ncap
        rings.append((-half - rho * np.sin(phi), rho * np.cos(phi)))
    rings += [(x, rho) for x in np.linspace(-half, half, nbody + 1)]
    for k in range(1, ncap):
        phi = 0.5 * np.pi * k / ncap
        rings.append((half + rho * np.sin(phi), rho * np.cos(phi)))
    th = 2 * np.pi * np.arange(segments) / segments
    verts = [[-half - rho, 0.0, 0.0]]
    for x, r in rings:
        verts += [[x, r * np.cos(t), r * np.sin(t)] for t in th]
    verts.append([half + rho, 0.0, 0.0])
    nr = len(rings)
    last = 1 + nr * segments
    faces = []
    for j in range(segments):
        j1 = (j + 1) % segments
        faces.append([0, 1 + j1, 1 + j])
        faces.append([last, 1 + (nr - 1) * segments + j, 1 + (nr - 1) * segments + j1])
    for r in range(nr - 1):
        a0, b0 = 1 + r * segments, 1 + (r + 1) * segments
        for j in range(segments):
            j1 = (j + 1) % segments
            faces.append([a0 + j, a0 + j1, b0 + j1])
            faces.append([a0 + j, b0 + j1, b0 + j])
    mesh = TriMesh(np.array(verts), np.array(faces))
    if mesh.signed_volume() < 0:
        mesh = TriMesh(mesh.vertices, mesh.faces[:, [0, 2, 1]])
    return mesh


def bend_capsule(gen: BentCapsuleGenerator, vertices, rho0, kappa, rho):
    """Map points near the straight capsule of radius rho0 onto the bent one.

    The offset from the closest axis point is carried in the arc's moving
    frame and scaled by rho / rho0, so points on the straight surface land
    exactly on the bent surface while kappa * rho < 1.
    """
    x = np.asarray(vertices, dtype=np.float64)
    half = 0.5 * gen.length
    s = np.clip(x[:, 0], -half, half)
    off = x - np.stack([s, np.zeros_like(s), np.zeros_like(s)], axis=1)
    off *= rho / rho0
    p, tan, nrm = gen.frame(s, kappa)
    return p + off[:, :1] * tan + off[:, 1:2] * nrm + off[:, 2:3] * np.array([0.0, 0.0, 1.0])


def synth_collection(family: str, count: int, seed: int, params=None, template_level=3) -> Collection:
    """Build a collection of ``count`` shapes.

    ``params`` optionally fixes the per-shape parameters (radius,
    axis triple, (kappa, rho) or bump code); otherwise they are drawn from
    ``numpy.random.default_rng(seed)``.  The sphere-radius family without
    params uses radii evenly spaced from 1.0 to 1.5.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; choose from {', '.join(FAMILIES)}")
    if count < 2:
        raise ValueError("count must be at least 2")
    if params is not None and len(params) != count:
        raise ValueError("params must have one entry per shape")
    rng = np.random.default_rng(seed)
    if family == "sphere-radius":
        gen = SphereGenerator()
        radii = np.linspace(1.0, 1.5, count) if params is None else np.asarray(params, dtype=np.float64).ravel()
        base = icosphere(template_level)
        meshes = [base.with_vertices(base.vertices * r) for r in radii]
        codes = radii[:, None]
    elif family == "ellipsoid-axes":
        gen = EllipsoidGenerator()
        axes = rng.uniform(0.8, 1.3, (count, 3)) if params is None else np.asarray(params, dtype=np.float64)
        base = icosphere(template_level)
        meshes = [base.with_vertices(base.vertices * a) for a in axes]
        codes = np.array([EllipsoidGenerator.code_for_axes(a) for a in axes])
    elif family == "bent-capsule":
        gen = BentCapsuleGenerator()
        if params is None:
            kap = rng.uniform(*CAPSULE_KAPPA, count)
            rho = rng.uniform(*CAPSULE_RHO, count)
            codes = np.stack([kap, rho], axis=1)
        else:
            codes = np.asarray(params, dtype=np.float64).reshape(count, 2)
        if np.any(codes[:, 0] * codes[:, 1] >= 1.0):
            raise ValueError("bent-capsule parameters need kappa * rho < 1")
        base = capsule_template(gen)
        meshes = [base.with_vertices(bend_capsule(gen, base.vertices, CAPSULE_TEMPLATE_RHO, k, r))
                  for k, r in codes]
    else:
        gen = BumpFieldGenerator(8, basis="gaussian")
        codes = 0.15 * rng.standard_normal((count, 8)) if params is None else np.asarray(params, dtype=np.float64)
        base = icosphere(template_level)
        meshes = [base.with_vertices(base.vertices * gen.radius(base.vertices, z)[:, None]) for z in codes]
    return Collection(family, gen, np.asarray(codes, dtype=np.float64), meshes, int(seed))
