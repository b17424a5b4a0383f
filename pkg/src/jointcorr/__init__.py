"""Dense correspondences across a deformable shape collection.

Implicit generators induce correspondences between nearby level sets; a
template is registered along latent paths and over a shape graph, then the
deformed templates are refined jointly.
"""
from .deform import DeformQuadForm, build_acap, build_arap, build_combined
from .errors import (DegenerateConstraintError, EmptySurfaceError, GraphError, MeshFormatError, MeshIndexError,
                     ShapeMismatchError, SolverError, StageError)
from .implicit import VoxelGrid, latent_path
from .induced import build_constraints, cycle_residual, r_geo, solve_displacement, transfer_operator
from .kernels import BACKEND
from .marching import marching_cubes
from .mesh import TriMesh, icosphere
from .meshio import load_mesh, save_mesh
from .metrics import eval_correspondences, export_error_field
from .pipeline import PipelineConfig, run_pipeline
from .refine import init_generator, refine
from .registration import (RegistrationConfig, build_shape_graph, propagate_correspondences, register_along_path,
                           register_arap)
from .synth import synth_collection

__version__ = "0.1.0"
