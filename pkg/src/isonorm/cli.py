"""Command-line pipeline: orient, evaluate, export-field, synth."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import assembly, isosurface, orient, solver
from .cloud import (PointCloud, ParseError, add_noise, build_knn_graph,
                    load_cloud, normalize, synth_shape, write_ply, write_xyz)
from .octree import build_octree

PRESET_WEIGHTS = {"none": 1e-4, "noisy": 1e-2}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    depth: int = 7
    alpha: float = 1e4
    beta: float | None = None       # None: resolved from noise_preset
    gamma: float | None = None
    knn: int = 10
    cg_iters: int = 300
    rep_fraction: float = 1.0
    noise_preset: str = "none"
    seed: int = 0
    normal_source: str = "flipped_fitted"
    wij_squared: bool = False
    threads: int = 1
    trace: bool = False
    resolution: int = 64
    padding: float = 1.25
    tol: float = 0.0
    jacobi: bool = False

    def resolved(self) -> "PipelineConfig":
        if self.noise_preset not in PRESET_WEIGHTS:
            raise ValueError(f"unknown noise preset {self.noise_preset!r}")
        w = PRESET_WEIGHTS[self.noise_preset]
        cfg = replace(self,
                      beta=w if self.beta is None else self.beta,
                      gamma=w if self.gamma is None else self.gamma)
        if not 3 <= cfg.depth <= 10:
            raise ValueError("depth must be in [3, 10]")
        if cfg.alpha < 0 or cfg.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if cfg.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 0 < cfg.rep_fraction <= 1:
            raise ValueError("rep_fraction must be in (0, 1]")
        if cfg.normal_source not in ("flipped_fitted", "optimized"):
            raise ValueError(f"unknown normal source {cfg.normal_source!r}")
        return cfg


class _StageTimer:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def run(self, stage: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except Exception as exc:
            raise StageError(stage, exc) from exc
        self.timings[stage] = time.perf_counter() - t0
        return out


def run_orient(cloud: PointCloud, config: PipelineConfig):
    """Full orientation pipeline on a loaded cloud.

    Returns (OrientationResult, report dict, extras dict with the tree,
    the full-length coefficient vector, and the normalized cloud for
    downstream field export).
    """
    cfg = config.resolved()
    timer = _StageTimer()
    n = len(cloud)

    norm_cloud = timer.run("normalize", normalize, cloud, cfg.padding)

    if cfg.rep_fraction < 1.0:
        reps = timer.run("subsample", orient.subsample_representatives,
                         norm_cloud, fraction=cfg.rep_fraction, seed=cfg.seed)
    else:
        reps = timer.run("subsample", np.arange, n)
        if n > 100_000:
            print(f"warning: per-point optimization on {n} points; consider "
                  "--rep-fraction for large inputs", file=sys.stderr)
    rep_cloud = (norm_cloud if len(reps) == n
                 else PointCloud(norm_cloud.positions[reps]))

    graph = timer.run("knn", build_knn_graph, norm_cloud, cfg.knn,
                      workers=cfg.threads)
    rep_graph = (graph if len(reps) == n
                 else build_knn_graph(rep_cloud, min(cfg.knn, len(reps) - 1),
                                      workers=cfg.threads))

    fitted, degenerate = timer.run("fit", orient.estimate_unoriented,
                                   norm_cloud, graph)

    tree = timer.run("octree", build_octree, rep_cloud, cfg.depth)
    ops, info = timer.run("assembly", assembly.build_system,
                          rep_cloud, tree, rep_graph,
                          alpha=cfg.alpha, beta=cfg.beta, gamma=cfg.gamma,
                          wij_squared=cfg.wij_squared)
    state, solve_report = timer.run(
        "solve", solver.solve_cg, ops, max_iters=cfg.cg_iters, tol=cfg.tol,
        jacobi=cfg.jacobi, trace_energies=cfg.trace)

    def orient_stage():
        n_hat = state.n.reshape(-1, 3)
        rep_fitted = fitted[reps]
        if cfg.normal_source == "optimized":
            flipped = orient.flip_by_reference(rep_fitted, n_hat)
            rep_normals, fell_back = orient.use_optimized(n_hat, flipped)
            rep_source = np.where(fell_back, orient.SOURCE_FITTED,
                                  orient.SOURCE_OPTIMIZED)
        else:
            rep_normals = orient.flip_by_reference(rep_fitted, n_hat)
            rep_source = np.full(len(reps), orient.SOURCE_FITTED)
        inward = orient.propagate_from_representatives(
            norm_cloud, reps, rep_normals, fitted)
        source = np.full(n, orient.SOURCE_FITTED, dtype=rep_source.dtype)
        source[reps] = rep_source
        # the optimized field rises from the box toward the surface, so the
        # flip rule lands on inward normals; emit the outward convention
        return orient.OrientationResult(
            normals=-inward, source=source,
            rep_indices=reps if len(reps) != n else None,
            degenerate_fit=degenerate)

    result = timer.run("orient", orient_stage)

    residuals = solve_report.residuals
    report = {
        "n_points": n,
        "n_representatives": int(len(reps)),
        "config": asdict(cfg),
        "octree": {"max_depth": tree.max_depth, "n_nodes": info["n_nodes"],
                   "n_boundary": info["n_boundary"],
                   "n_free": int(len(ops.free_ids))},
        "nnz": info["nnz"],
        "nnz_full": info["nnz_full"],
        "solver": {
            "iterations": solve_report.iterations,
            "residual_first": float(residuals[0]),
            "residual_last": float(residuals[-1]),
            "residual_min": float(residuals.min()),
            "energies": solve_report.energies,
        },
        "degenerate_fits": int(degenerate.sum()),
        "timings": timer.timings,
    }
    if cloud.gt_normals is not None:
        report["accuracy"] = orient.orientation_accuracy(result.normals,
                                                         cloud.gt_normals)

    x_full = np.zeros(tree.n_nodes)
    x_full[ops.free_ids] = state.x
    extras = {"tree": tree, "x_full": x_full, "normalized": norm_cloud,
              "rep_cloud": rep_cloud, "ops": ops, "state": state,
              "solve_report": solve_report}
    return result, report, extras


def _load_stage(path: str) -> PointCloud:
    try:
        return load_cloud(path)
    except Exception as exc:
        raise StageError("load", exc) from exc


def cmd_orient(args, config: PipelineConfig) -> int:
    cloud = _load_stage(args.input)
    result, report, extras = run_orient(cloud, config)
    out = args.output or os.path.splitext(args.input)[0] + "_oriented.ply"
    write_ply(out, cloud.positions, result.normals)
    report["input"] = args.input
    report["output"] = out
    report_path = args.report or os.path.splitext(out)[0] + "_report.json"
    with open(report_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    if config.trace:
        trace_path = os.path.splitext(out)[0] + "_trace.csv"
        with open(trace_path, "w") as f:
            f.write(extras["solve_report"].trace_csv())
    if "accuracy" in report:
        print(f"accuracy {report['accuracy']['accuracy']:.4f} "
              f"({report['accuracy']['n_correct']}/{report['n_points']})")
    print(f"wrote {out} and {report_path}")
    return 0


def _evaluate_pair(result_path: str, gt_path: str) -> dict:
    res = load_cloud(result_path)
    gt = load_cloud(gt_path)
    if res.gt_normals is None:
        raise ValueError(f"{result_path}: no normals to evaluate")
    if gt.gt_normals is None:
        raise ValueError(f"{gt_path}: no ground-truth normals")
    if len(res) != len(gt):
        raise ValueError(f"point count mismatch: {len(res)} vs {len(gt)}")
    return orient.orientation_accuracy(res.gt_normals, gt.gt_normals)


def cmd_evaluate(args) -> int:
    if os.path.isdir(args.result):
        names = sorted(f for f in os.listdir(args.result)
                       if f.endswith((".ply", ".xyz")))
        if not names:
            raise StageError("load", ValueError(f"no clouds in {args.result}"))
        shapes = {}
        for name in names:
            gt_file = os.path.join(args.gt, name)
            try:
                shapes[name] = _evaluate_pair(os.path.join(args.result, name),
                                              gt_file)
            except Exception as exc:
                raise StageError("evaluate", exc) from exc
        accs = [s["accuracy"] for s in shapes.values()]
        out = {
            "shapes": shapes,
            "n_shapes": len(shapes),
            "average": float(np.mean(accs)),
            "over_97": float(np.mean([s["over_97"] for s in shapes.values()])),
            "over_90": float(np.mean([s["over_90"] for s in shapes.values()])),
        }
    else:
        try:
            out = _evaluate_pair(args.result, args.gt)
        except StageError:
            raise
        except Exception as exc:
            raise StageError("evaluate", exc) from exc
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.report:
        with open(args.report, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


def cmd_export_field(args, config: PipelineConfig) -> int:
    cloud = _load_stage(args.input)
    result, report, extras = run_orient(cloud, config)
    tree = extras["tree"]
    norm_cloud = extras["normalized"]
    isovalue = 0.5

    grid = isosurface.sample_field(tree, extras["x_full"], config.resolution)
    verts, faces = isosurface.marching_cubes(grid, isovalue=isovalue)
    # exports live in the input's world frame
    s, t = norm_cloud.transform
    world_grid = isosurface.ScalarGrid(origin=norm_cloud.to_world(grid.origin),
                                       spacing=grid.spacing / s,
                                       values=grid.values)
    stem = os.path.splitext(args.input)[0]
    grid_path = args.grid or stem + "_field.txt"
    mesh_path = args.mesh or stem + "_mesh.ply"
    isosurface.write_grid(grid_path, world_grid)
    world_verts = norm_cloud.to_world(verts) if len(verts) else verts
    isosurface.write_mesh_ply(mesh_path, world_verts, faces,
                              comment=f"isovalue {isovalue}")
    stats = isosurface.mesh_stats(world_verts, faces)
    report["field"] = {"resolution": config.resolution, "isovalue": isovalue,
                       "grid": grid_path, "mesh": mesh_path, "mesh_stats": stats}
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    print(f"wrote {grid_path} and {mesh_path} "
          f"({stats['components']} component(s))")
    return 0


def cmd_synth(args) -> int:
    params = {}
    if args.radius is not None:
        params["radius"] = args.radius
    if args.radii is not None:
        params["radii"] = tuple(float(v) for v in args.radii.split(","))
    for key in ("major", "minor", "lx", "ly", "thickness"):
        val = getattr(args, key)
        if val is not None:
            params[key] = val
    try:
        cloud = synth_shape(args.kind, args.n, seed=args.seed, **params)
        if args.sigma > 0:
            cloud = add_noise(cloud, args.sigma, args.noise_ratio,
                              seed=args.seed + 1)
    except ValueError as exc:
        raise StageError("synth", exc) from exc
    if args.out.endswith(".ply"):
        write_ply(args.out, cloud.positions, cloud.gt_normals)
    else:
        write_xyz(args.out, cloud.positions, cloud.gt_normals)
    print(f"wrote {args.out} ({len(cloud)} points)")
    return 0


def _read_config_file(path: str) -> dict:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = text.split("=", 1)
            out[key.strip().replace("-", "_")] = val.strip()
    return out


_CONFIG_TYPES = {
    "depth": int, "alpha": float, "beta": float, "gamma": float,
    "knn": int, "cg_iters": int, "rep_fraction": float,
    "noise_preset": str, "seed": int, "normal_source": str,
    "wij_squared": lambda v: str(v).lower() in ("1", "true", "yes"),
    "threads": int, "trace": lambda v: str(v).lower() in ("1", "true", "yes"),
    "resolution": int, "padding": float, "tol": float,
    "jacobi": lambda v: str(v).lower() in ("1", "true", "yes"),
}


def build_config(args) -> PipelineConfig:
    """Defaults, overridden by a config file, overridden by explicit flags."""
    values = {}
    if getattr(args, "config", None):
        raw = _read_config_file(args.config)
        for key, val in raw.items():
            if key not in _CONFIG_TYPES:
                raise ValueError(f"{args.config}: unknown config key {key!r}")
            values[key] = _CONFIG_TYPES[key](val)
    for key in _CONFIG_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return PipelineConfig(**values)


def _add_pipeline_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file; flags win")
    p.add_argument("--depth", type=int, help="octree depth (default 7)")
    p.add_argument("--alpha", type=float, help="Poisson-residual weight")
    p.add_argument("--beta", type=float, help="local-consistency weight")
    p.add_argument("--gamma", type=float, help="normal-length regularizer weight")
    p.add_argument("--knn", type=int, help="neighbor count (default 10)")
    p.add_argument("--cg-iters", dest="cg_iters", type=int,
                   help="CG iterations (default 300)")
    p.add_argument("--rep-fraction", dest="rep_fraction", type=float,
                   help="representative subset fraction (default 1.0)")
    p.add_argument("--noise-preset", dest="noise_preset",
                   choices=("none", "noisy"), help="beta/gamma preset")
    p.add_argument("--seed", type=int, help="RNG seed (default 0)")
    p.add_argument("--normal-source", dest="normal_source",
                   choices=("flipped_fitted", "optimized"))
    p.add_argument("--wij-squared", dest="wij_squared", action="store_const",
                   const=True, help="use squared distances in edge weights")
    p.add_argument("--threads", type=int, help="worker threads for searches")
    p.add_argument("--trace", action="store_const", const=True,
                   help="write per-iteration residual/energy CSV")
    p.add_argument("--resolution", type=int, help="field sampling resolution")
    p.add_argument("--padding", type=float, help="unit-cube padding (default 1.25)")
    p.add_argument("--tol", type=float, help="CG relative-residual stop (default 0)")
    p.add_argument("--jacobi", action="store_const", const=True,
                   help="enable diagonal preconditioning")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="isonorm",
        description="Globally consistent normal orientation for unoriented "
                    "point clouds via isovalue-constrained Poisson optimization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("orient", help="orient a point cloud")
    p.add_argument("input")
    p.add_argument("-o", "--output", help="oriented PLY path")
    p.add_argument("--report", help="report JSON path")
    _add_pipeline_flags(p)

    p = sub.add_parser("evaluate", help="score oriented normals against ground truth")
    p.add_argument("result", help="oriented cloud file or directory")
    p.add_argument("--gt", required=True, help="ground-truth file or directory")
    p.add_argument("--report", help="write the JSON here as well")

    p = sub.add_parser("export-field", help="orient, then export the implicit field")
    p.add_argument("input")
    p.add_argument("--grid", help="scalar grid output path")
    p.add_argument("--mesh", help="isosurface mesh output path")
    p.add_argument("--report", help="report JSON path")
    _add_pipeline_flags(p)

    p = sub.add_parser("synth", help="generate a synthetic test cloud")
    p.add_argument("kind", choices=("sphere", "nested_spheres", "torus", "thin_slab"))
    p.add_argument("out")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius", type=float)
    p.add_argument("--radii", help="comma-separated layer radii")
    p.add_argument("--major", type=float)
    p.add_argument("--minor", type=float)
    p.add_argument("--lx", type=float)
    p.add_argument("--ly", type=float)
    p.add_argument("--thickness", type=float)
    p.add_argument("--sigma", type=float, default=0.0,
                   help="noise std as a fraction of the bbox diagonal")
    p.add_argument("--noise-ratio", dest="noise_ratio", type=float, default=1.0)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "orient":
            return cmd_orient(args, build_config(args))
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "export-field":
            return cmd_export_field(args, build_config(args))
        if args.command == "synth":
            return cmd_synth(args)
        raise ValueError(f"unknown command {args.command!r}")
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, solver.NumericalError):
            return 2
        return 1
    except solver.NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
