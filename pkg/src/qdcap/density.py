"""Semi-classical 2DEG sheet density and metal-insulator-transition contours.

Solves the zero-temperature Thomas-Fermi fixed point on the Si/SiO2
interface plane: Poisson with gate potentials and interface sheet charge
sigma = -e * n_s, closed by n_s = dos_2d * max(0, phi - V_threshold).  The
iso-density contour at the critical density bounds the metallic dot region,
which can be promoted to a conductor sheet in the device solid.

The sheet charge lives in the first semiconductor cell below the interface,
so that cell should be thin (~1 nm, see interface_grid_spec) for the
interface potential to be sampled accurately.

The fixed point is solved with an active-set iteration: on the cells where
the 2DEG is open the zero-temperature charge is linear in phi, so each
iteration solves one SPD system with the quantum capacitance added to the
diagonal, then updates the open set.  Plain damped mixing of the density
(scheme="picard") is also available but diverges unless the mixing is below
roughly C_ox/C_q, which is ~0.004 for these stacks.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg
from shapely.geometry import Point, box as shapely_box

from .constants import E_CHARGE_AC
from .field import SolveError, assemble, drive_vector
from .geometry import GeometryError, Polygon2D, _resolve_recipe, build_solid
from .grid import GridSpec

log = logging.getLogger("qdcap.density")

CM2_PER_NM2 = 1e-14


@dataclass(frozen=True)
class DensityParams:
    """Thomas-Fermi model inputs.

    dos_2d defaults to the Si(100) 2DEG value (two valleys, spin 2,
    m* = 0.19 m0); it is a physics input not taken from any device table.
    threshold_offset_v is the flat-band/threshold calibration of the stack
    and defaults to 0 with no claim of accuracy; calibrate it per device.
    """

    critical_density: float = 1.5e11        # electrons / cm^2
    dos_2d: float = 1.59e14                 # states / (cm^2 eV)
    threshold_offset_v: float = 0.0
    mixing: float = 0.3
    sc_tol: float = 1e-6
    max_outer: int = 200
    scheme: str = "newton"                  # "newton" (active set) or "picard"

    def __post_init__(self):
        if not self.critical_density > 0:
            raise ValueError("critical_density must be positive")
        if not self.dos_2d > 0:
            raise ValueError("dos_2d must be positive")
        if not 0 < self.mixing <= 1:
            raise ValueError("mixing must be in (0, 1]")


@dataclass
class DensityMap:
    """Sheet density on the interface plane for one bias condition."""

    x: np.ndarray              # lateral cell centers, nm
    y: np.ndarray
    n_s: np.ndarray            # (nx, ny) electrons / cm^2, 0 outside the sheet
    active: np.ndarray         # (nx, ny) bool, cells carrying the 2DEG model
    biases: dict
    residual: float
    iterations: int
    converged: bool
    interface_z: float

    def minmax(self):
        return float(self.n_s.min()), float(self.n_s.max())


def interface_grid_spec(base: GridSpec, interface_z, sheet_cell_nm=1.0) -> GridSpec:
    """Grid spec with a thin cell right below the interface plane."""
    big = 1e9
    box = ((-big, big, -big, big, interface_z - sheet_cell_nm, interface_z),
           (None, None, sheet_cell_nm))
    return replace(base, refinement_boxes=tuple(base.refinement_boxes) + (box,))


def _interface_layer(grid):
    k = np.searchsorted(grid.z, grid.interface_z - 1e-6)
    if k < 1 or abs(grid.z[k] - grid.interface_z) > max(grid.spec.snap_tolerance_nm, 1e-6):
        raise SolveError(
            f"grid has no plane at the interface z = {grid.interface_z} nm"
        )
    return k


def solve_thomas_fermi(grid, biases, params: DensityParams = DensityParams(),
                       tol=1e-8, preconditioner="amg") -> DensityMap:
    """Self-consistent sheet density under the given gate biases.

    The grid must be built from a solid without 2DEG conductor sheets (the
    density is being solved, not imposed); biases must cover every conductor
    in the grid.
    """
    drive = drive_vector(grid.conductor_names, biases)
    kz = _interface_layer(grid)
    xc, yc, _ = grid.centers
    dxw, dyw, dzw = grid.widths

    sheet_dz = float(dzw[kz - 1])
    if sheet_dz > 2.5:
        log.warning(
            "sheet cell below the interface is %.2f nm thick; use "
            "interface_grid_spec for ~1 nm to sample the interface potential accurately",
            sheet_dz,
        )

    substrate_mat = int(grid.material[0, 0, 0])
    lat_active = (grid.conductor[:, :, kz - 1] == 0) & (
        grid.material[:, :, kz - 1] == substrate_mat
    )
    if not lat_active.any():
        raise SolveError("no semiconductor cells below the interface plane")

    op = assemble(grid)
    nx, ny, nz = grid.shape
    ii, jj = np.nonzero(lat_active)
    flat_cells = (ii * ny + jj) * nz + (kz - 1)
    unk = op.unknown_of_cell[flat_cells]
    ok = unk >= 0
    ii, jj, unk = ii[ok], jj[ok], unk[ok]

    area_nm2 = np.multiply.outer(dxw, dyw)[ii, jj]
    # charge per density: Q_cell [aC] = -gamma * max(0, phi - Vt) with
    # gamma [aF] = e * dos * area; gamma/e is the quantum capacitance term
    gamma = E_CHARGE_AC * params.dos_2d * CM2_PER_NM2 * area_nm2

    b0 = np.bincount(op.cface_u, weights=op.cface_g * drive[op.cface_k],
                     minlength=op.n_unknowns)
    vt = params.threshold_offset_v
    maxiter = int(50 * math.sqrt(op.n_unknowns)) + 10

    def poisson(diag_extra, rhs, M):
        A = op.A if diag_extra is None else op.A + sp.diags(diag_extra)
        count = [0]
        x, _ = cg(A, rhs, rtol=tol, atol=0.0, maxiter=maxiter, M=M,
                  callback=lambda _x: count.__setitem__(0, count[0] + 1))
        res = float(np.linalg.norm(rhs - A @ x) / np.linalg.norm(rhs)) if np.any(rhs) else 0.0
        return x, res, count[0]

    n = np.zeros(len(unk))
    iterations = 0
    converged = False
    M = None

    if params.scheme == "newton":
        open_set = np.zeros(len(unk), dtype=bool)
        M = op.preconditioner(preconditioner)
        for it in range(params.max_outer):
            iterations = it + 1
            diag_extra = np.zeros(op.n_unknowns)
            diag_extra[unk[open_set]] = gamma[open_set]
            rhs = b0.copy()
            rhs[unk[open_set]] += gamma[open_set] * vt
            phi, _res, _cnt = poisson(diag_extra, rhs, M)
            phi_sheet = phi[unk]
            new_open = phi_sheet > vt
            n_new = np.where(new_open, params.dos_2d * (phi_sheet - vt), 0.0)
            scale = max(float(np.abs(n_new).max()), 1.0)
            delta = float(np.abs(n_new - n).max()) / scale
            n = n_new
            if (new_open == open_set).all() and delta <= params.sc_tol:
                converged = True
                break
            open_set = new_open
    elif params.scheme == "picard":
        for it in range(params.max_outer):
            iterations = it + 1
            extra = np.zeros(op.n_unknowns)
            extra[unk] = -E_CHARGE_AC * n * CM2_PER_NM2 * area_nm2
            if M is None:
                M = op.preconditioner(preconditioner)
            phi, _res, _cnt = poisson(None, b0 + extra, M)
            n_prime = params.dos_2d * np.maximum(0.0, phi[unk] - vt)
            n_next = (1 - params.mixing) * n + params.mixing * n_prime
            scale = max(float(np.abs(n_next).max()), 1.0)
            delta = float(np.abs(n_next - n).max()) / scale
            n = n_next
            if delta <= params.sc_tol:
                converged = True
                break
    else:
        raise ValueError(f"unknown scheme {params.scheme!r}")

    # self-consistency residual: one plain update applied to the final state
    extra = np.zeros(op.n_unknowns)
    extra[unk] = -E_CHARGE_AC * n * CM2_PER_NM2 * area_nm2
    phi, _res, _cnt = poisson(None, b0 + extra, op.preconditioner(preconditioner))
    n_check = params.dos_2d * np.maximum(0.0, phi[unk] - vt)
    residual = float(np.abs(n_check - n).max() / max(np.abs(n).max(), 1.0))

    if not converged:
        log.warning("Thomas-Fermi solve not converged after %d iterations "
                    "(residual %.3e)", iterations, residual)

    n_full = np.zeros((nx, ny))
    n_full[ii, jj] = n
    active = np.zeros((nx, ny), dtype=bool)
    active[ii, jj] = True
    bias_dict = {name: float(v) for name, v in zip(grid.conductor_names, drive)}

    return DensityMap(
        x=xc, y=yc, n_s=n_full, active=active, biases=bias_dict,
        residual=residual, iterations=iterations, converged=converged,
        interface_z=grid.interface_z,
    )


# ---------------------------------------------------------------------------
# Iso-density contours

@dataclass
class ContourPolygon:
    polygon: Polygon2D
    above_level: bool          # density inside exceeds the level
    is_dot: bool = False

    @property
    def classification(self):
        if self.is_dot:
            return "dot island"
        return "extended 2DEG" if self.above_level else "below level"


@dataclass
class DotRegion:
    level: float
    polygons: list = field(default_factory=list)   # [ContourPolygon]
    note: str = ""
    seed: tuple | None = None

    @property
    def dot_polygon(self):
        dots = [c.polygon for c in self.polygons if c.is_dot]
        if len(dots) != 1:
            raise GeometryError(
                f"region has {len(dots)} dot polygons, need exactly one "
                "(pass a dot_seed inside the dot)"
            )
        return dots[0]


def extract_contour(dmap: DensityMap, level, dot_seed=None) -> DotRegion:
    """Marching-squares iso-density contours at the given level.

    Contour vertices interpolate linearly along cell edges of the lateral
    grid.  Each closed polygon is classified by whether the density inside
    exceeds the level; the polygon containing ``dot_seed`` is marked as the
    dot island.
    """
    from skimage.measure import find_contours

    if not level > 0:
        raise ValueError("contour level must be positive")
    lo, hi = dmap.minmax()
    region = DotRegion(level=float(level), seed=dot_seed)
    if not lo <= level <= hi:
        region.note = f"level {level:g} outside map range [{lo:g}, {hi:g}]"
        return region

    # pad below-level so every contour closes, then clip back to the domain
    pad_val = -1.0
    z = np.pad(dmap.n_s, 1, constant_values=pad_val)
    dx0 = dmap.x[1] - dmap.x[0] if len(dmap.x) > 1 else 1.0
    dy0 = dmap.y[1] - dmap.y[0] if len(dmap.y) > 1 else 1.0
    xpad = np.concatenate([[dmap.x[0] - dx0], dmap.x, [dmap.x[-1] + dx0]])
    ypad = np.concatenate([[dmap.y[0] - dy0], dmap.y, [dmap.y[-1] + dy0]])

    domain = shapely_box(dmap.x[0], dmap.y[0], dmap.x[-1], dmap.y[-1])
    seed_pt = Point(*dot_seed) if dot_seed is not None else None

    for contour in find_contours(z, level):
        xs = np.interp(contour[:, 0], np.arange(len(xpad)), xpad)
        ys = np.interp(contour[:, 1], np.arange(len(ypad)), ypad)
        if len(xs) < 4:
            continue
        try:
            ring = Polygon2D(list(zip(xs, ys)))
        except GeometryError:
            continue
        geom = ring.to_shapely().intersection(domain)
        parts = getattr(geom, "geoms", [geom])
        for part in parts:
            if part.is_empty or part.area <= 0:
                continue
            part = part.simplify(1e-9)
            rep = part.representative_point()
            i = int(np.clip(np.searchsorted(dmap.x, rep.x) - 1, 0, len(dmap.x) - 1))
            j = int(np.clip(np.searchsorted(dmap.y, rep.y) - 1, 0, len(dmap.y) - 1))
            above = bool(dmap.n_s[i, j] > level)
            try:
                poly = Polygon2D(list(part.exterior.coords))
            except GeometryError:
                continue
            is_dot = bool(above and seed_pt is not None and part.contains(seed_pt))
            region.polygons.append(ContourPolygon(poly, above, is_dot))

    dots = [c for c in region.polygons if c.is_dot]
    if len(dots) > 1:  # nested contours can all contain the seed; keep innermost
        dots.sort(key=lambda c: c.polygon.area)
        for c in dots[1:]:
            c.is_dot = False
    return region


def strip_sheet_conductors(recipe):
    """Recipe copy without conductor_sheet steps.

    The Thomas-Fermi solver computes the 2DEG rather than imposing it, so the
    grid it runs on must not contain the sheet conductors.
    """
    doc = copy.deepcopy(recipe.raw)
    doc["steps"] = [s for s in doc["steps"] if s["kind"] != "conductor_sheet"]
    if not doc["steps"]:
        raise GeometryError("recipe has no non-sheet steps")
    return _resolve_recipe(doc, recipe.name + "-nosheets")


# ---------------------------------------------------------------------------
# Promotion back into the solid

def promote_to_conductor(solid, region: DotRegion, depth_nm=10.0, name="C1"):
    """Rebuild the solid with the named conductor sheet's footprint replaced
    by the region's dot polygon, extruded depth_nm into the substrate.

    All other conductors are untouched.  The name must be unused or belong
    to an existing conductor_sheet step.
    """
    dot = region.dot_polygon
    recipe = solid.recipe
    (x0, x1), (y0, y1), (z0, z1) = recipe.domain_box
    bx = dot.bounds
    if bx[0] < x0 or bx[1] > x1 or bx[2] < y0 or bx[3] > y1:
        raise GeometryError("dot polygon extends outside the domain")
    if solid.interface_z - depth_nm < z0:
        raise GeometryError("sheet depth extends below the substrate")

    dot_geom = dot.to_shapely()
    for step in recipe.steps:
        if step.kind == "conductor_sheet" and step.conductor != name:
            other = recipe.masks[step.mask].union()
            if dot_geom.intersection(other).area > 1e-9:
                raise GeometryError(
                    f"promoted dot polygon overlaps conductor {step.conductor!r}"
                )

    doc = copy.deepcopy(recipe.raw)
    mask_name = f"{name.lower()}_promoted"
    doc.setdefault("masks", {})[mask_name] = {
        "layer": "2deg",
        "polygons": [[[float(x), float(y)] for x, y in dot.vertices]],
    }
    replaced = False
    for sdef in doc["steps"]:
        if sdef.get("conductor") == name:
            if sdef["kind"] != "conductor_sheet":
                raise GeometryError(
                    f"conductor {name!r} is not a sheet conductor; cannot replace it"
                )
            sdef["mask"] = mask_name
            sdef["depth_nm"] = float(depth_nm)
            replaced = True
            break
    if not replaced:
        substrate = doc["steps"][0]
        doc["steps"].insert(1, {
            "kind": "conductor_sheet",
            "material": substrate["material"],
            "depth_nm": float(depth_nm),
            "mask": mask_name,
            "conductor": name,
        })
    new_recipe = _resolve_recipe(doc, recipe.name + f"+{name}")
    return build_solid(new_recipe)
