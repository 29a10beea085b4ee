"""Globally consistent normal orientation for unoriented point clouds.

Jointly optimizes an octree B-spline indicator function and per-point
normals under isovalue constraints on the discretized Poisson equation,
then converts the optimized normal field into oriented outward unit
normals.
"""

from .cloud import (KnnGraph, ParseError, PointCloud, add_noise,
                    build_knn_graph, load_cloud, normalize, synth_shape,
                    write_ply, write_xyz)
from .octree import Octree, build_octree, depth_neighbors, dump_nodes
from .assembly import (SystemOperators, assemble_consistency,
                       assemble_divergence, assemble_point_eval,
                       assemble_splat, assemble_stiffness, build_system,
                       compute_density, eliminate_boundary)
from .solver import (NumericalError, SolutionState, SolverReport,
                     apply_system, conjugate_gradient, rhs, solve_cg,
                     total_energy)
from .orient import (OrientationResult, estimate_unoriented,
                     flip_by_reference, orientation_accuracy,
                     propagate_from_representatives,
                     subsample_representatives, use_optimized)
from .isosurface import ScalarGrid, marching_cubes, mesh_stats, sample_field
from .cli import PipelineConfig, run_orient

__version__ = "0.1.0"

__all__ = [
    "KnnGraph", "ParseError", "PointCloud", "add_noise", "build_knn_graph",
    "load_cloud", "normalize", "synth_shape", "write_ply", "write_xyz",
    "Octree", "build_octree", "depth_neighbors", "dump_nodes",
    "SystemOperators", "assemble_consistency", "assemble_divergence",
    "assemble_point_eval", "assemble_splat", "assemble_stiffness",
    "build_system", "compute_density", "eliminate_boundary",
    "NumericalError", "SolutionState", "SolverReport", "apply_system",
    "conjugate_gradient", "rhs", "solve_cg", "total_energy",
    "OrientationResult", "estimate_unoriented", "flip_by_reference",
    "orientation_accuracy", "propagate_from_representatives",
    "subsample_representatives", "use_optimized",
    "ScalarGrid", "marching_cubes", "mesh_stats", "sample_field",
    "PipelineConfig", "run_orient",
]
