"""Command-line driver: build -> grid -> extract -> density -> sweep -> export.

Subcommands mirror the pipeline stages; flags override config-document
fields which override defaults.  Exit codes: 0 success, 1 validation error
or bad usage, 2 solver failure.  Diagnostics go to standard error,
controlled by the QDCAP_LOG environment variable (quiet, info, debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import capmatrix, density, geometry, grid as gridmod, io as qio, recipes, sensitivity
from .field import SolveError
from .geometry import GeometryError, RecipeError
from .grid import GridError

log = logging.getLogger("qdcap.cli")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(ValueError):
    pass


def _setup_logging():
    level = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("QDCAP_LOG", "info"), logging.INFO
    )
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def _load_recipe(path_str):
    p = Path(path_str)
    if not p.exists():
        bundled = recipes.bundled_path(path_str)
        if bundled is not None:
            p = bundled
        else:
            raise RecipeError(f"recipe file not found: {path_str}")
    return geometry.load_recipe_file(p)


def _load_grid_spec(args):
    if getattr(args, "grid", None):
        p = Path(args.grid)
        if not p.exists():
            bundled = recipes.bundled_path(args.grid)
            if bundled is None:
                raise GridError(f"grid spec file not found: {args.grid}")
            p = bundled
        with open(p, "r", encoding="utf-8") as fh:
            spec = gridmod_spec_from_doc(json.load(fh))
    else:
        spec = gridmod.GridSpec()
    if getattr(args, "grid_target", None):
        from dataclasses import replace
        spec = replace(spec, target_cell_nm=args.grid_target)
    return spec


def gridmod_spec_from_doc(doc: dict) -> gridmod.GridSpec:
    boxes = tuple(
        (tuple(b["box"]), b.get("spacing"))
        for b in doc.get("refinement_boxes", [])
    )
    kwargs = {k: doc[k] for k in
              ("target_cell_nm", "min_cell_nm", "max_cell_nm",
               "snap_tolerance_nm", "max_cells") if k in doc}
    return gridmod.GridSpec(refinement_boxes=boxes, **kwargs)


def _load_biases(path_str):
    p = Path(path_str)
    if not p.exists():
        bundled = recipes.bundled_path(path_str)
        if bundled is None:
            raise RecipeError(f"biases file not found: {path_str}")
        p = bundled
    with open(p, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "biases" not in doc:
        raise RecipeError("biases document missing 'biases' block")
    return doc


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    log.info("wrote %s", path)


def _density_params(doc, args):
    kwargs = dict(doc.get("params", {}))
    if "threshold_offset_v" in doc:
        kwargs["threshold_offset_v"] = doc["threshold_offset_v"]
    return density.DensityParams(**kwargs)


def _build_parser():
    top = _Parser(prog="qdcap", description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="command")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        return p

    def common_solver(p):
        p.add_argument("--tol", type=float, default=1e-8, help="relative residual tolerance")
        p.add_argument("--threads", type=int, default=1, help="concurrent drive solves")

    def common_grid(p):
        p.add_argument("--grid", help="grid spec JSON document")
        p.add_argument("--grid-target", type=float, default=None,
                       help="override nominal cell size (nm)")

    p = add("build", "build the device solid and report conductors")
    p.add_argument("--recipe", required=True)
    p.add_argument("--out-report")

    p = add("grid", "generate the voxel grid and report cell statistics")
    p.add_argument("--recipe", required=True)
    common_grid(p)
    p.add_argument("--out-vtk")
    p.add_argument("--out-report")

    p = add("extract", "extract the Maxwell capacitance matrix")
    p.add_argument("--recipe", required=True)
    common_grid(p)
    common_solver(p)
    p.add_argument("--out-matrix")
    p.add_argument("--out-spice")
    p.add_argument("--out-vtk")
    p.add_argument("--subckt-name", default="qdcap")

    p = add("density", "solve the 2DEG density and extract the MIT contour")
    p.add_argument("--recipe", required=True)
    p.add_argument("--biases", required=True)
    common_grid(p)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--level", type=float, default=None,
                   help="contour level in electrons/cm^2 (default: critical density)")
    p.add_argument("--out-density")
    p.add_argument("--out-contours")

    p = add("refine-dot", "replace the dot conductor with the MIT contour and re-extract")
    p.add_argument("--recipe", required=True)
    p.add_argument("--biases", required=True)
    common_grid(p)
    common_solver(p)
    p.add_argument("--level", type=float, default=None)
    p.add_argument("--depth", type=float, default=10.0, help="sheet depth into silicon (nm)")
    p.add_argument("--dot-name", default="C1")
    p.add_argument("--out-matrix")
    p.add_argument("--out-contours")

    p = add("sweep", "re-extract target couplings over a parameter sweep")
    p.add_argument("--recipe", required=True)
    common_grid(p)
    common_solver(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--targets", required=True, help="comma-separated gate:dot pairs")
    p.add_argument("--out-csv")

    p = add("check", "verify structural properties of a matrix CSV")
    p.add_argument("matrix")
    p.add_argument("--tol-rel", type=float, default=1e-3)

    return top


def run(argv) -> int:
    """Entry point; returns the process exit code."""
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return 1
        return _dispatch(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RecipeError, GeometryError, GridError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SolveError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "build":
        solid = geometry.build_solid(_load_recipe(args.recipe))
        report = geometry.validate_solid(solid)
        text = str(report) + "\n"
        if args.out_report:
            _write(args.out_report, text)
        print(text, end="")
        return 0

    if args.command == "grid":
        solid = geometry.build_solid(_load_recipe(args.recipe))
        g = gridmod.generate_grid(solid, _load_grid_spec(args))
        report = str(g.report()) + "\n"
        if args.out_vtk:
            _write(args.out_vtk, qio.export_vtk(g))
        if args.out_report:
            _write(args.out_report, report)
        print(report, end="")
        return 0

    if args.command == "extract":
        solid = geometry.build_solid(_load_recipe(args.recipe))
        g = gridmod.generate_grid(solid, _load_grid_spec(args))
        C = capmatrix.extract_matrix(g, tol=args.tol, workers=args.threads)
        diag = capmatrix.check_matrix(C)
        print(str(diag), file=sys.stderr)
        csv_text = qio.export_matrix_csv(C)
        if args.out_matrix:
            _write(args.out_matrix, csv_text)
        else:
            print(csv_text, end="")
        if args.out_spice:
            _write(args.out_spice, qio.export_spice(C, args.subckt_name))
        if args.out_vtk:
            _write(args.out_vtk, qio.export_vtk(g))
        return 0

    if args.command == "density":
        recipe = _load_recipe(args.recipe)
        doc = _load_biases(args.biases)
        params = _density_params(doc, args)
        stripped = density.strip_sheet_conductors(recipe)
        solid = geometry.build_solid(stripped)
        spec = density.interface_grid_spec(_load_grid_spec(args), solid.interface_z)
        g = gridmod.generate_grid(solid, spec)
        dmap = density.solve_thomas_fermi(g, doc["biases"], params, tol=args.tol)
        level = args.level or doc.get("level") or params.critical_density
        seed = tuple(doc["dot_seed"]) if "dot_seed" in doc else None
        region = density.extract_contour(dmap, level, dot_seed=seed)
        if args.out_density:
            _write(args.out_density, qio.export_density_csv(dmap))
        if args.out_contours:
            _write(args.out_contours, qio.export_contours(region))
        print(f"density: {dmap.iterations} iterations, residual {dmap.residual:.3e}, "
              f"range [{dmap.minmax()[0]:.3g}, {dmap.minmax()[1]:.3g}] cm^-2, "
              f"{len(region.polygons)} contour polygon(s) at {level:g}")
        return 0 if dmap.converged else 2

    if args.command == "refine-dot":
        recipe = _load_recipe(args.recipe)
        doc = _load_biases(args.biases)
        params = _density_params(doc, args)
        base_spec = _load_grid_spec(args)
        stripped = density.strip_sheet_conductors(recipe)
        solid_s = geometry.build_solid(stripped)
        spec_s = density.interface_grid_spec(base_spec, solid_s.interface_z)
        g_s = gridmod.generate_grid(solid_s, spec_s)
        dmap = density.solve_thomas_fermi(g_s, doc["biases"], params, tol=args.tol)
        if not dmap.converged:
            raise SolveError("density solve did not converge")
        level = args.level or doc.get("level") or params.critical_density
        seed = tuple(doc["dot_seed"]) if "dot_seed" in doc else None
        region = density.extract_contour(dmap, level, dot_seed=seed)
        full = geometry.build_solid(recipe)
        promoted = density.promote_to_conductor(full, region, depth_nm=args.depth,
                                                name=args.dot_name)
        g = gridmod.generate_grid(promoted, base_spec)
        C = capmatrix.extract_matrix(g, tol=args.tol, workers=args.threads)
        csv_text = qio.export_matrix_csv(C)
        if args.out_matrix:
            _write(args.out_matrix, csv_text)
        else:
            print(csv_text, end="")
        if args.out_contours:
            _write(args.out_contours, qio.export_contours(region))
        return 0

    if args.command == "sweep":
        recipe = _load_recipe(args.recipe)
        values = [float(v) for v in args.values.split(",") if v]
        targets = []
        for pair in args.targets.split(","):
            gate, _, dot = pair.partition(":")
            if not dot:
                raise RecipeError(f"target {pair!r} is not gate:dot")
            targets.append((gate, dot))
        spec = sensitivity.SweepSpec(parameter=args.param, values=values, targets=targets)
        table = sensitivity.sweep(recipe, spec, _load_grid_spec(args),
                                  tol=args.tol, workers=args.threads)
        csv_text = qio.export_sweep_csv(table)
        if args.out_csv:
            _write(args.out_csv, csv_text)
        else:
            print(csv_text, end="")
        return 0

    if args.command == "check":
        with open(args.matrix, "r", encoding="utf-8") as fh:
            C = qio.load_matrix_csv(fh.read())
        diag = capmatrix.check_matrix(C, tol_rel=args.tol_rel)
        print(str(diag))
        return 0 if diag.passed else 1

    raise _UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    return run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
