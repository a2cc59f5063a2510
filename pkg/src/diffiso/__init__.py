"""Differentiable isosurface extraction on deformable grids.

Core pipeline: sample or load a scalar grid, extract a watertight manifold
mesh with per-vertex derivatives against the grid (marching_cubes), certify
it (quality), compare or fit it (render, optimize), and shade it with
factorized neural textures (texture).  marching_tets and demo2d carry the
tetrahedral/2D baselines used for the non-linear-field artifact comparison.
"""

__version__ = "0.1.0"

from .fields import (AnalyticField, BoxField, PlaneField, SmoothedNoiseField,
                     SphereField, TorusField, UnionField, WarpedField,
                     field_from_spec, sample_field_to_grid)
from .grids import (DeformableGrid, ScalarGrid, apply_nonlinear_warp,
                    density_to_opacity, load_grid, save_grid)
from .marching_cubes import (VertexJacobian, chain_gradient,
                             clamp_displacements, extract)
from .marching_tets import extract_mt, extract_mt_staggered
from .mesh import IndexedMesh, load_obj, save_obj, save_ply
from .optimize import (FitResult, OptimizeConfig, TargetSpec, fit_grid,
                       finetune_vertices, gradcheck, loss_and_vertex_grad)
from .quality import QualityReport, certify, check_manifold, check_watertight
from .raymarch import RaySampleSet, volume_render_ray
from .render import (Camera, DepthMap, chamfer, look_at_camera, render_depth,
                     surface_deviation, vsa, vsa_curve)
from .texture import (MlpDecoder, ShDecoder, VmTexture, bake_vertex_colors,
                      decode_color, encode_frequencies, eval_features, fit_sh)
