"""Command-line frontend.

Verbs: extract, extract-mt, demo2d, validate, vsa, chamfer, optimize,
finetune, gradcheck, shade, bench, reso-sweep.  All randomized paths take
explicit seeds; identical command lines with identical seeds write
bit-identical artifacts (timing numbers excepted).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .demo2d import demo_2d
from .fields import (AnalyticField, Circle2D, Line2D, field_from_spec,
                     sample_field_to_grid, sphere_surface_points,
                     torus_surface_points, box_surface_points)
from .grids import DeformableGrid, density_to_opacity, load_grid, save_grid
from .marching_cubes import chain_gradient, clamp_displacements, extract
from .marching_tets import extract_mt, extract_mt_staggered
from .mesh import IndexedMesh, load_obj, save_obj, save_ply
from .optimize import (OptimizeConfig, TargetSpec, fit_grid, finetune_vertices,
                       gradcheck, loss_and_vertex_grad)
from .quality import certify
from .render import (Camera, chamfer, load_depth, look_at_camera, render_depth,
                     save_depth, surface_deviation, vsa_curve)
from .texture import (MlpDecoder, ShDecoder, VmTexture, bake_vertex_colors,
                      decode_color, encode_frequencies, eval_features,
                      load_weights)

VERBS = ("extract", "extract-mt", "demo2d", "validate", "vsa", "chamfer",
         "optimize", "finetune", "gradcheck", "shade", "bench", "reso-sweep")


def _field_from_args(args) -> AnalyticField:
    if args.field_json:
        with open(args.field_json) as fh:
            return field_from_spec(json.load(fh))
    spec = {"kind": args.field}
    if args.field == "sphere":
        spec["radius"] = args.radius
    elif args.field == "torus":
        spec.update(major=args.major, minor=args.minor)
    elif args.field == "box":
        spec["half_extents"] = (args.half_extent,) * 3
    elif args.field == "plane":
        spec["offset"] = args.plane_offset
    elif args.field == "union":
        spec = {"kind": "union", "parts": [
            {"kind": "sphere", "center": (0.35, 0.5, 0.5), "radius": 0.22},
            {"kind": "sphere", "center": (0.65, 0.5, 0.5), "radius": 0.22}]}
    elif args.field == "noise":
        spec["seed"] = args.seed
    if getattr(args, "warp_shift", None) is not None:
        spec["warp_shift"] = args.warp_shift
    return field_from_spec(spec)


def _add_field_args(p):
    p.add_argument("--field", default="sphere",
                   choices=["sphere", "box", "torus", "plane", "union", "noise"])
    p.add_argument("--field-json", help="JSON field description (overrides --field)")
    p.add_argument("--radius", type=float, default=0.35)
    p.add_argument("--major", type=float, default=0.3)
    p.add_argument("--minor", type=float, default=0.1)
    p.add_argument("--half-extent", type=float, default=0.3)
    p.add_argument("--plane-offset", type=float, default=0.5)
    p.add_argument("--warp-shift", type=float, default=None,
                   help="apply exp(s)-1-shift to the field before sampling")
    p.add_argument("--res", type=int, default=32)


def _grid_from_args(args):
    if getattr(args, "grid", None):
        grid = load_grid(args.grid)
        if isinstance(grid, DeformableGrid):
            return grid
        return DeformableGrid.undisplaced(grid)
    field = _field_from_args(args)
    n = args.res
    base = sample_field_to_grid(field, (n, n, n), (0.0, 0.0, 0.0), 1.0 / (n - 1))
    if getattr(args, "step", None) is not None:
        base = density_to_opacity(base, args.step, args.threshold)
    grid = DeformableGrid.undisplaced(base)
    if getattr(args, "displacement", 0.0):
        rng = np.random.default_rng(args.seed)
        amp = args.displacement * float(np.min(base.spacing))
        disp = rng.uniform(-amp, amp, size=base.dims + (3,))
        grid = clamp_displacements(DeformableGrid(base=base, displacement=disp))
    return grid


def _camera_from_args(args) -> Camera:
    if args.camera:
        with open(args.camera) as fh:
            return Camera.from_dict(json.load(fh))
    return look_at_camera(eye=(1.8, 1.4, 1.2), target=(0.5, 0.5, 0.5),
                          width=args.width, height=args.height)


def _parse_taus(text: str):
    # "0.001..0.1" (16 log steps) or "0.001..0.1:32" or comma list
    if ".." in text:
        rng, _, count = text.partition(":")
        lo, hi = rng.split("..")
        n = int(count) if count else 16
        return np.geomspace(float(lo), float(hi), n)
    return np.array([float(x) for x in text.split(",")])


def _write_report(report, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="diffiso",
        description="Differentiable isosurface extraction toolkit: watertight "
                    "manifold meshing from scalar grids with analytic vertex "
                    "gradients, plus baselines, certification, depth metrics, "
                    "grid fitting and neural-texture shading.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--threads", type=int, default=0,
                    help="BLAS thread cap (0 = library default); results are "
                         "bit-identical regardless")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default=".", help="directory for artifacts")
    sub = ap.add_subparsers(dest="verb", required=True, metavar="|".join(VERBS))

    p = sub.add_parser("extract", help="marching cubes extraction + certification")
    _add_field_args(p)
    p.add_argument("--grid", help="load a saved grid instead of sampling a field")
    p.add_argument("--iso", type=float, default=0.0)
    p.add_argument("--mode", choices=["closed", "open"], default="closed")
    p.add_argument("--displacement", type=float, default=0.0,
                   help="random node displacement amplitude, in cells")
    p.add_argument("--step", type=float, default=None,
                   help="ray-march step: convert density grid to opacity-threshold")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="opacity threshold t used with --step")
    p.add_argument("--out", default="mesh.obj")
    p.add_argument("--ply", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--jacobian", default=None,
                   help="write sparse jacobian triplets here")
    p.add_argument("--save-grid", default=None)
    p.add_argument("--assert-quality", action="store_true",
                   help="exit nonzero unless fully certified")

    p = sub.add_parser("extract-mt", help="marching tetrahedra baseline")
    _add_field_args(p)
    p.add_argument("--grid")
    p.add_argument("--iso", type=float, default=0.0)
    p.add_argument("--mode", choices=["closed", "open"], default="closed")
    p.add_argument("--lattice", choices=["kuhn", "staggered"], default="kuhn")
    p.add_argument("--out", default="mesh_mt.obj")
    p.add_argument("--report", default=None)

    p = sub.add_parser("demo2d", help="marching squares vs triangles on a 2D field")
    p.add_argument("--mode", choices=["squares", "triangles", "both"], default="both")
    p.add_argument("--shape", choices=["line", "circle"], default="line")
    p.add_argument("--offset", type=float, default=0.37)
    p.add_argument("--warp-shift", type=float, default=None)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--iso", type=float, default=0.0)
    p.add_argument("--svg", default=None, help="SVG path ({mode} substituted)")
    p.add_argument("--csv", default=None, help="CSV path ({mode} substituted)")

    p = sub.add_parser("validate", help="certify a mesh file (nonzero exit on failure)")
    p.add_argument("mesh")
    p.add_argument("--skip-self-intersection", action="store_true")
    p.add_argument("--report", default=None)

    p = sub.add_parser("vsa", help="visible-surface-agreement curve between two meshes")
    p.add_argument("--mesh-a", required=True)
    p.add_argument("--mesh-b", required=True)
    p.add_argument("--tau", default="0.001..0.1", help="range lo..hi[:n] or comma list")
    p.add_argument("--camera", default=None, help="camera JSON file")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--csv", default="vsa.csv")
    p.add_argument("--save-depth", default=None,
                   help="prefix for dumping both depth maps")

    p = sub.add_parser("chamfer", help="chamfer distance between two point sets")
    p.add_argument("--points-a", required=True, help="xyz/whitespace point file or mesh")
    p.add_argument("--points-b", required=True)

    p = sub.add_parser("optimize", help="fit a grid to a target point cloud")
    _add_field_args(p)
    p.add_argument("--grid")
    p.add_argument("--target", required=True,
                   help="target: xyz point file, mesh file, or preset "
                        "sphere|torus|box")
    p.add_argument("--target-count", type=int, default=4096)
    p.add_argument("--config", default=None, help="OptimizeConfig JSON file")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr-values", type=float, default=None)
    p.add_argument("--out", default="fitted.obj")
    p.add_argument("--trace", default="trace.csv")
    p.add_argument("--save-grid", default=None)
    p.add_argument("--report", default=None)

    p = sub.add_parser("finetune", help="vertex-only refinement of a mesh")
    p.add_argument("mesh")
    p.add_argument("--target", required=True)
    p.add_argument("--target-count", type=int, default=4096)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--out", default="finetuned.obj")
    p.add_argument("--report", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    _add_field_args(p)
    p.add_argument("--grid")
    p.add_argument("--target", default="torus")
    p.add_argument("--target-count", type=int, default=1024)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--json", default=None)
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="exit nonzero when max relative error exceeds this")

    p = sub.add_parser("shade", help="evaluate texture colors at mesh vertices")
    p.add_argument("mesh")
    p.add_argument("--weights", required=True, help="weight manifest JSON")
    p.add_argument("--decoder", choices=["hq", "fast"], default="hq")
    p.add_argument("--view", default="0,0,1")
    p.add_argument("--out", default="shaded.ply")

    p = sub.add_parser("bench", help="forward/backward timing harness")
    _add_field_args(p)
    p.add_argument("--repeat", type=int, default=1000)
    p.add_argument("--csv", default=None)

    p = sub.add_parser("reso-sweep", help="extraction quality across resolutions")
    _add_field_args(p)
    p.add_argument("--resolutions", default="32,64,128,256")
    p.add_argument("--csv", default="reso_sweep.csv")
    p.add_argument("--assert-monotone", action="store_true")
    return ap


def _load_points(spec: str, count: int, seed: int):
    if spec == "sphere":
        return sphere_surface_points(count, seed=seed)
    if spec == "torus":
        return torus_surface_points(count, seed=seed)
    if spec == "box":
        return box_surface_points(count, seed=seed)
    path = Path(spec)
    if path.suffix in (".obj",):
        mesh = load_obj(path)
        return mesh.vertices
    return np.loadtxt(path, dtype=np.float64).reshape(-1, 3)


def _cmd_extract(args, out_dir: Path) -> int:
    grid = _grid_from_args(args)
    mesh, jac = extract(grid, iso=args.iso, mode=args.mode)
    save_obj(mesh, out_dir / args.out)
    if args.ply:
        save_ply(mesh, out_dir / args.ply)
    if args.jacobian:
        from .marching_cubes import save_jacobian_triplets
        save_jacobian_triplets(jac, out_dir / args.jacobian)
    if args.save_grid:
        save_grid(grid, out_dir / args.save_grid)
    report = certify(mesh)
    if args.report:
        _write_report(report, out_dir / args.report)
    print(f"extracted {mesh.vertex_count} vertices / {mesh.triangle_count} "
          f"triangles; watertight={report.watertight} "
          f"manifold={report.manifold} euler={report.euler_characteristic}")
    if args.assert_quality and not report.all_ok():
        return 1
    return 0


def _cmd_extract_mt(args, out_dir: Path) -> int:
    if args.lattice == "staggered":
        field = _field_from_args(args)
        n = args.res
        mesh = extract_mt_staggered(field, (n, n, n), (0, 0, 0), 1.0 / (n - 1),
                                    iso=args.iso, mode=args.mode)
    else:
        mesh = extract_mt(_grid_from_args(args), iso=args.iso, mode=args.mode)
    save_obj(mesh, out_dir / args.out)
    report = certify(mesh, self_intersection=False)
    if args.report:
        _write_report(report, out_dir / args.report)
    print(f"extracted {mesh.vertex_count} vertices / {mesh.triangle_count} "
          f"triangles; watertight={report.watertight}")
    return 0


def _cmd_demo2d(args, out_dir: Path) -> int:
    shape = Line2D(offset=args.offset) if args.shape == "line" \
        else Circle2D(radius=args.offset)
    field = shape.warped(args.warp_shift) if args.warp_shift is not None else shape
    modes = ["squares", "triangles"] if args.mode == "both" else [args.mode]
    for mode in modes:
        result = demo_2d(field, mode, args.res, iso=args.iso)
        svg = args.svg or "demo2d_{mode}.svg"
        csvp = args.csv or "demo2d_{mode}.csv"
        result.to_svg(out_dir / svg.format(mode=mode))
        result.to_csv(out_dir / csvp.format(mode=mode))
        print(f"{mode}: {result.stats['vertex_count']} vertices, "
              f"deviation rms {result.stats['deviation_rms']:.3e}, "
              f"x std {result.stats['x_std']:.3e}")
    return 0


def _cmd_validate(args, out_dir: Path) -> int:
    mesh = load_obj(args.mesh)
    report = certify(mesh, self_intersection=not args.skip_self_intersection)
    if args.report:
        _write_report(report, out_dir / args.report)
    print(json.dumps(report.to_dict(), indent=2))
    return 0 if report.all_ok() else 1


def _cmd_vsa(args, out_dir: Path) -> int:
    mesh_a = load_obj(args.mesh_a)
    mesh_b = load_obj(args.mesh_b)
    cam = _camera_from_args(args)
    da = render_depth(mesh_a, cam)
    db = render_depth(mesh_b, cam)
    if args.save_depth:
        save_depth(da, cam, out_dir / (args.save_depth + "_a"))
        save_depth(db, cam, out_dir / (args.save_depth + "_b"))
    curve = vsa_curve(da, db, _parse_taus(args.tau))
    with open(out_dir / args.csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "vsa"])
        for tau, value in curve:
            writer.writerow([f"{tau:.17g}", f"{value:.17g}"])
    print(f"vsa over {len(curve)} tolerances: "
          f"min {min(v for _, v in curve):.4f} max {max(v for _, v in curve):.4f}")
    return 0


def _cmd_chamfer(args, out_dir: Path) -> int:
    a = _load_points(args.points_a, 0, 0)
    b = _load_points(args.points_b, 0, 0)
    print(f"{chamfer(a, b):.17g}")
    return 0


def _optimize_config(args) -> OptimizeConfig:
    if args.config:
        cfg = OptimizeConfig.from_file(args.config)
    else:
        cfg = OptimizeConfig()
    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if getattr(args, "lr_values", None) is not None:
        overrides["lr_values"] = args.lr_values
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    return cfg


def _cmd_optimize(args, out_dir: Path) -> int:
    grid = _grid_from_args(args)
    target = TargetSpec(points=_load_points(args.target, args.target_count, args.seed))
    cfg = _optimize_config(args)
    result = fit_grid(grid, target, cfg)
    save_obj(result.mesh, out_dir / args.out)
    result.save_trace(out_dir / args.trace)
    if args.save_grid:
        save_grid(result.grid, out_dir / args.save_grid)
    if args.report:
        _write_report(result.report, out_dir / args.report)
    print(f"loss {result.trace[0]['loss']:.6g} -> {result.trace[-1]['loss']:.6g} "
          f"over {cfg.iterations} iterations; certified={result.report.all_ok()}")
    return 0


def _cmd_finetune(args, out_dir: Path) -> int:
    mesh = load_obj(args.mesh)
    target = TargetSpec(points=_load_points(args.target, args.target_count, args.seed))
    cfg = OptimizeConfig(iterations=args.iterations, lr_vertices=args.lr)
    tuned = finetune_vertices(mesh, target, cfg)
    save_obj(tuned, out_dir / args.out)
    report = certify(tuned)
    if args.report:
        _write_report(report, out_dir / args.report)
    print(f"finetuned {tuned.vertex_count} vertices; connectivity unchanged; "
          f"watertight={report.watertight} "
          f"self_intersection_free={report.self_intersection_free}")
    return 0


def _cmd_gradcheck(args, out_dir: Path) -> int:
    grid = _grid_from_args(args)
    target = TargetSpec(points=_load_points(args.target, args.target_count, args.seed))
    report = gradcheck(grid, target, samples=args.samples, seed=args.seed)
    summary = {k: report[k] for k in ("checked", "max_rel_err", "mean_rel_err", "step")}
    summary["excluded"] = [list(e) for e in report["excluded"]]
    if args.json:
        with open(out_dir / args.json, "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
    print(json.dumps(summary))
    return 0 if report["max_rel_err"] < args.tolerance else 1


def _cmd_shade(args, out_dir: Path) -> int:
    mesh = load_obj(args.mesh)
    weights = load_weights(args.weights)
    tex = VmTexture(m_xy=weights["m_xy"], m_yz=weights["m_yz"], m_zx=weights["m_zx"],
                    v_x=weights["v_x"], v_y=weights["v_y"], v_z=weights["v_z"],
                    basis=weights["basis"])
    if args.decoder == "hq":
        dec = MlpDecoder.from_weights(weights)
    else:
        dec = ShDecoder()
    view = np.array([float(x) for x in args.view.split(",")])
    colored = bake_vertex_colors(mesh, tex, dec, view_dir=view)
    save_ply(colored, out_dir / args.out)
    print(f"shaded {colored.vertex_count} vertices -> {args.out}")
    return 0


def _cmd_bench(args, out_dir: Path) -> int:
    grid = _grid_from_args(args)
    rows = []

    def time_many(fn, n):
        times = []
        for _ in range(n):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return times

    mesh, jac = extract(grid)
    rng = np.random.default_rng(args.seed)
    cotangent = rng.normal(size=(len(jac), 3))
    mt_mesh = extract_mt(grid)
    print(f"matched sizes: mc {mesh.triangle_count} triangles, "
          f"mt {mt_mesh.triangle_count} triangles")
    for name, fn in (
        ("mc_forward", lambda: extract(grid)),
        ("mc_forward_backward", lambda: chain_gradient(extract(grid)[1], cotangent)),
        ("mt_forward", lambda: extract_mt(grid)),
    ):
        times = time_many(fn, args.repeat)
        rows.append({"op": name, "repeat": args.repeat,
                     "median_s": statistics.median(times),
                     "mean_s": statistics.fmean(times),
                     "min_s": min(times), "max_s": max(times)})
    ratio = rows[2]["median_s"] / rows[0]["median_s"]
    for row in rows:
        print(f"{row['op']}: median {row['median_s'] * 1e3:.3f} ms "
              f"mean {row['mean_s'] * 1e3:.3f} ms over {row['repeat']} reps")
    print(f"mt/mc forward median ratio: {ratio:.2f} (environment-specific; "
          f"no external speed figure is asserted)")
    if args.csv:
        with open(out_dir / args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return 0


def _cmd_reso_sweep(args, out_dir: Path) -> int:
    field = _field_from_args(args)
    if not field.is_sdf:
        print("reso-sweep needs an exact SDF field", file=sys.stderr)
        return 1
    resolutions = [int(x) for x in args.resolutions.split(",")]
    rows = []
    for n in resolutions:
        grid = sample_field_to_grid(field, (n, n, n), (0, 0, 0), 1.0 / (n - 1))
        mesh, _ = extract(grid)
        stats = surface_deviation(mesh, field)
        rows.append({"resolution": n, "vertices": mesh.vertex_count,
                     "triangles": mesh.triangle_count,
                     "deviation_rms": stats["rms"], "deviation_max": stats["max"]})
        print(f"res {n}: {mesh.vertex_count} vertices, "
              f"rms deviation {stats['rms']:.3e}")
    with open(out_dir / args.csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    monotone = all(rows[i + 1]["deviation_rms"] <= rows[i]["deviation_rms"]
                   for i in range(len(rows) - 1))
    print(f"deviation monotone non-increasing: {monotone}")
    if args.assert_monotone and not monotone:
        return 1
    return 0


_COMMANDS = {
    "extract": _cmd_extract,
    "extract-mt": _cmd_extract_mt,
    "demo2d": _cmd_demo2d,
    "validate": _cmd_validate,
    "vsa": _cmd_vsa,
    "chamfer": _cmd_chamfer,
    "optimize": _cmd_optimize,
    "finetune": _cmd_finetune,
    "gradcheck": _cmd_gradcheck,
    "shade": _cmd_shade,
    "bench": _cmd_bench,
    "reso-sweep": _cmd_reso_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
        os.environ.setdefault("OPENBLAS_NUM_THREADS", str(args.threads))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        return _COMMANDS[args.verb](args, out_dir)
    except (OSError, ValueError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
