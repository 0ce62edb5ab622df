"""Nonuniform rectilinear voxelization of a DeviceSolid.

Grid planes are inserted at every axis-aligned material/conductor interface
coordinate reported by the solid, then gaps are filled with smoothly graded
spacing (adjacent-cell ratio <= 2).  Cells are labeled by sampling the solid
at their centroids, so axis-aligned interfaces are exact and oblique edges
staircase at the local cell size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# the finest mesh dimension meaningful for these devices; refine() refuses to go below
HARD_MIN_CELL_NM = 0.01


class GridError(ValueError):
    """Raised for unsatisfiable grid specifications."""


def _as_triple(v):
    if np.isscalar(v):
        return (float(v),) * 3
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise GridError("per-axis value needs exactly 3 entries")
    return t


@dataclass(frozen=True)
class GridSpec:
    """Meshing parameters: nominal spacing, clamps, and refinement boxes.

    ``refinement_boxes`` is a sequence of ``(box, spacing)`` pairs where box
    is (x0, x1, y0, y1, z0, z1) and spacing is a scalar or per-axis triple
    (None entries leave that axis at the base target).  Box spacing applies
    to grid planes falling inside the box's interval on each axis.
    """

    target_cell_nm: object = 10.0
    min_cell_nm: float = 0.05
    max_cell_nm: float = 30.0
    refinement_boxes: tuple = ()
    snap_tolerance_nm: float = 1e-6
    max_cells: int = 20_000_000

    def __post_init__(self):
        tgt = _as_triple(self.target_cell_nm)
        object.__setattr__(self, "target_cell_nm", tgt)
        if not (0 < self.min_cell_nm <= min(tgt) and max(tgt) <= self.max_cell_nm):
            raise GridError(
                f"need 0 < min_cell ({self.min_cell_nm}) <= target {tgt} <= max_cell ({self.max_cell_nm})"
            )
        boxes = []
        for bx, sp in self.refinement_boxes:
            if len(bx) != 6:
                raise GridError("refinement box needs (x0, x1, y0, y1, z0, z1)")
            if np.isscalar(sp) or sp is None:
                sp = (sp,) * 3
            sp = tuple(None if s is None else float(s) for s in sp)
            boxes.append((tuple(float(v) for v in bx), sp))
        object.__setattr__(self, "refinement_boxes", tuple(boxes))


def refine(spec: GridSpec, factor: float) -> GridSpec:
    """Scale target and clamps by 1/factor (snap tolerance unchanged)."""
    if not factor > 0:
        raise GridError(f"refinement factor must be positive, got {factor}")
    new_min = spec.min_cell_nm / factor
    if new_min < HARD_MIN_CELL_NM - 1e-15 and factor > 1:
        raise GridError(
            f"refined min cell {new_min:.4g} nm is below the {HARD_MIN_CELL_NM} nm floor"
        )
    boxes = tuple(
        (bx, tuple(None if s is None else s / factor for s in sp))
        for bx, sp in spec.refinement_boxes
    )
    return GridSpec(
        target_cell_nm=tuple(t / factor for t in spec.target_cell_nm),
        min_cell_nm=new_min,
        max_cell_nm=spec.max_cell_nm / factor,
        refinement_boxes=boxes,
        snap_tolerance_nm=spec.snap_tolerance_nm,
        max_cells=spec.max_cells,
    )


# ---------------------------------------------------------------------------
# 1D plane filling

def _merge_planes(values, tol):
    vals = np.sort(np.asarray(values, dtype=float))
    merged = [vals[0]]
    for v in vals[1:]:
        if v - merged[-1] <= tol:
            continue
        merged.append(v)
    return np.array(merged)

def _gap_spacings(L, s_left, s_right, t, growth=1.5):
    """Cell widths filling a gap of length L: geometric growth from both end
    spacings up to the local target t, uniform middle, scaled to sum to L."""
    s_left = min(s_left, t, L)
    s_right = min(s_right, t, L)
    left, right = [s_left], [s_right]
    while sum(left) + sum(right) < L and (
        left[-1] < t * 0.999 or right[-1] < t * 0.999
    ):
        if abs(left[-1] - right[-1]) < 1e-12:
            left.append(min(left[-1] * growth, t))
            right.append(min(right[-1] * growth, t))
        elif left[-1] < right[-1]:
            left.append(min(left[-1] * growth, t))
        else:
            right.append(min(right[-1] * growth, t))

    fixed = sum(left) + sum(right)
    candidates = []
    rem = L - fixed
    m0 = max(0, int(round(rem / t)))
    for m in {max(m0 - 1, 0), m0, m0 + 1}:
        total = fixed + m * t
        candidates.append((abs(math.log(L / total)), m, L / total))
    if len(left) == 1 and len(right) == 1:
        # single-cell option for short gaps between comparable regions
        total1 = 0.5 * (s_left + s_right)
        candidates.append((abs(math.log(L / total1)), -1, 1.0))
    candidates.sort()
    _, m, c = candidates[0]
    if m < 0:
        return [L]
    return [w * c for w in left] + [t * c] * m + [w * c for w in reversed(right)]


def _fill_axis(mandatory, target, min_cell, max_cell, boxes_1d, snap_tol):
    """Insert graded planes between mandatory planes on one axis.

    boxes_1d: list of ((lo, hi), spacing) intervals overriding the target.
    """
    planes = _merge_planes(mandatory, snap_tol)
    if len(planes) < 2:
        raise GridError("axis needs at least two planes")
    gaps = np.diff(planes)
    too_close = np.nonzero(gaps < min_cell - 1e-12)[0]
    if too_close.size:
        i = too_close[0]
        raise GridError(
            f"interface planes at {planes[i]:.6g} and {planes[i + 1]:.6g} nm are closer "
            f"than min_cell_nm ({min_cell} nm)"
        )

    def local_target(a, b):
        t = target
        refined = False
        mid = 0.5 * (a + b)
        for (lo, hi), sp in boxes_1d:
            if lo - 1e-9 <= mid <= hi + 1e-9:
                t = min(t, sp)
                refined = True
        t_edge = max(min(t, max_cell, b - a), min_cell)
        # away from interfaces, large unrefined gaps may coarsen to max_cell
        if refined:
            t_mid = t_edge
        else:
            t_mid = max(min(max(t_edge, (b - a) / 8), max_cell), min_cell)
        return t_edge, t_mid

    targets = [local_target(planes[i], planes[i + 1]) for i in range(len(planes) - 1)]
    coords = [planes[0]]
    for i in range(len(planes) - 1):
        L = gaps[i]
        s_l = min(targets[i - 1][0], targets[i][0]) if i > 0 else targets[i][0]
        s_r = min(targets[i][0], targets[i + 1][0]) if i < len(targets) - 1 else targets[i][0]
        widths = _gap_spacings(L, s_l, s_r, targets[i][1])
        acc = planes[i]
        for w in widths[:-1]:
            acc += w
            coords.append(acc)
        coords.append(planes[i + 1])
    return np.array(coords)


# ---------------------------------------------------------------------------
# Voxel grid

@dataclass
class VoxelGrid:
    """Rectilinear grid with per-cell material and conductor labels."""

    x: np.ndarray            # plane coordinates, strictly increasing
    y: np.ndarray
    z: np.ndarray
    material: np.ndarray     # (nx, ny, nz) int16 index into materials
    conductor: np.ndarray    # (nx, ny, nz) int16, 0 = none
    materials: list
    conductor_names: list
    interface_z: float
    spec: GridSpec
    warnings: list = field(default_factory=list)

    @property
    def shape(self):
        return self.material.shape

    @property
    def n_cells(self):
        return self.material.size

    @property
    def centers(self):
        return (
            0.5 * (self.x[:-1] + self.x[1:]),
            0.5 * (self.y[:-1] + self.y[1:]),
            0.5 * (self.z[:-1] + self.z[1:]),
        )

    @property
    def widths(self):
        return (np.diff(self.x), np.diff(self.y), np.diff(self.z))

    def eps_cells(self):
        """Relative permittivity per cell (conductor cells carry their
        material's value but are never used as dielectric)."""
        eps_by_mat = np.array([m.relative_permittivity for m in self.materials])
        return eps_by_mat[self.material]

    def cell_volumes(self):
        dx, dy, dz = self.widths
        return dx[:, None, None] * dy[None, :, None] * dz[None, None, :]

    def report(self):
        return grid_report(self)


def generate_grid(solid, spec: GridSpec) -> VoxelGrid:
    """Discretize a DeviceSolid onto a nonuniform rectilinear grid."""
    (x0, x1), (y0, y1), (z0, z1) = solid.domain_box

    def boxes_for(axis):
        out = []
        for bx, sp in spec.refinement_boxes:
            lo, hi = bx[2 * axis], bx[2 * axis + 1]
            if sp[axis] is not None:
                out.append(((lo, hi), sp[axis]))
        return out

    axis_planes = []
    for axis, (solid_planes, lo, hi) in enumerate(
        [(solid.x_planes, x0, x1), (solid.y_planes, y0, y1), (solid.z_planes, z0, z1)]
    ):
        mand = set(np.asarray(solid_planes, dtype=float).tolist()) | {lo, hi}
        for (blo, bhi), _sp in boxes_for(axis):
            if blo > lo and blo < hi:
                mand.add(blo)
            if bhi > lo and bhi < hi:
                mand.add(bhi)
        coords = _fill_axis(
            sorted(mand),
            spec.target_cell_nm[axis],
            spec.min_cell_nm,
            spec.max_cell_nm,
            boxes_for(axis),
            spec.snap_tolerance_nm,
        )
        axis_planes.append(coords)

    xs, ys, zs = axis_planes
    n_total = (len(xs) - 1) * (len(ys) - 1) * (len(zs) - 1)
    if n_total > spec.max_cells:
        raise GridError(f"grid would have {n_total} cells, exceeding budget {spec.max_cells}")

    xc = 0.5 * (xs[:-1] + xs[1:])
    yc = 0.5 * (ys[:-1] + ys[1:])
    zc = 0.5 * (zs[:-1] + zs[1:])
    material, conductor = solid.label_grid(xc, yc, zc)

    warnings = []
    present = np.unique(conductor)
    for i, name in enumerate(solid.conductors):
        if (i + 1) not in present:
            warnings.append(f"conductor {name!r} has no cells at this resolution")

    return VoxelGrid(
        x=xs, y=ys, z=zs,
        material=material,
        conductor=conductor,
        materials=solid.materials,
        conductor_names=list(solid.conductors),
        interface_z=solid.interface_z,
        spec=spec,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# Reporting

@dataclass
class GridReport:
    axis_cells: tuple
    total_cells: int
    material_volumes: dict    # name -> nm^3
    conductor_areas: dict     # name -> exposed surface area nm^2
    warnings: list

    def __str__(self):
        nx, ny, nz = self.axis_cells
        lines = [f"cells: {nx} x {ny} x {nz} = {self.total_cells}"]
        for name, v in self.material_volumes.items():
            lines.append(f"  volume[{name}] = {v:.6g} nm^3")
        for name, a in self.conductor_areas.items():
            lines.append(f"  area[{name}] = {a:.6g} nm^2")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines)


def grid_report(grid: VoxelGrid) -> GridReport:
    vols = grid.cell_volumes()
    mat_vol = {}
    for i, m in enumerate(grid.materials):
        sel = grid.material == i
        if sel.any() or i == 0:
            mat_vol[m.name] = float(vols[sel].sum())

    # conductor surface area: faces where the conductor index changes
    dx, dy, dz = grid.widths
    face_area = [
        dy[None, :, None] * dz[None, None, :],
        dx[:, None, None] * dz[None, None, :],
        dx[:, None, None] * dy[None, :, None],
    ]
    areas = np.zeros(len(grid.conductor_names) + 1)
    cond = grid.conductor
    for ax in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        a, b = cond[tuple(lo)], cond[tuple(hi)]
        diff = a != b
        fa = np.broadcast_to(face_area[ax], a.shape)[diff]
        np.add.at(areas, a[diff], fa)
        np.add.at(areas, b[diff], fa)
        # domain boundary faces are exterior surface too
        first = [slice(None)] * 3
        first[ax] = 0
        last = [slice(None)] * 3
        last[ax] = -1
        for sl in (tuple(first), tuple(last)):
            cb = cond[sl]
            fa = np.broadcast_to(face_area[ax], cond.shape)[sl]
            np.add.at(areas, cb[cb > 0], fa[cb > 0])

    cond_area = {
        name: float(areas[i + 1]) for i, name in enumerate(grid.conductor_names)
    }
    nx, ny, nz = grid.shape
    return GridReport(
        axis_cells=(nx, ny, nz),
        total_cells=grid.n_cells,
        material_volumes=mat_vol,
        conductor_areas=cond_area,
        warnings=list(grid.warnings),
    )
