"""Process-variation sweeps: re-extract couplings under perturbed parameters.

Each sweep point re-resolves the recipe with one parameter substituted,
rebuilds solid and grid with the same GridSpec (layer interfaces snap onto
grid planes, so thickness changes are exactly representable), and reports
target couplings with percent change against the first value.

A sweep drives only the unique target dots: by reciprocity one unit drive on
a dot yields every coupling C(gate, dot), so a few-target sweep costs one
solve per (value, dot) instead of a full N-conductor extraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .capmatrix import CapacitanceMatrix, extract_columns
from .constants import EPS0_AF_PER_NM
from .geometry import GeometryError, RecipeError, build_solid
from .grid import generate_grid
from shapely.geometry import box as shapely_box


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple
    targets: tuple             # ((gate, dot), ...)

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "targets", tuple((g, d) for g, d in self.targets))
        if len(self.values) < 2:
            raise RecipeError("sweep needs at least 2 values")
        if not self.targets:
            raise RecipeError("sweep needs at least one (gate, dot) target")


@dataclass
class SweepRow:
    value: float
    achieved: float
    couplings: dict            # (gate, dot) -> aF
    pct_change: dict           # (gate, dot) -> percent vs first value


@dataclass
class SweepTable:
    parameter: str
    targets: tuple
    rows: list = field(default_factory=list)

    def column(self, gate, dot):
        return [r.couplings[(gate, dot)] for r in self.rows]


def sweep(recipe, spec: SweepSpec, grid_spec, tol=1e-8,
          preconditioner="amg", workers=1) -> SweepTable:
    """Run the extraction once per parameter value and tabulate couplings."""
    if spec.parameter not in recipe.parameters:
        raise RecipeError(f"parameter {spec.parameter!r} not in recipe parameters")
    dots = sorted({d for _g, d in spec.targets})
    table = SweepTable(parameter=spec.parameter, targets=spec.targets)
    base = None
    for value in spec.values:
        try:
            r = recipe.with_parameters(**{spec.parameter: value})
            solid = build_solid(r)
            grid = generate_grid(solid, grid_spec)
            cols, _prov = extract_columns(grid, dots, tol=tol,
                                          preconditioner=preconditioner, workers=workers)
        except Exception as exc:
            raise type(exc)(f"sweep value {spec.parameter}={value}: {exc}") from exc
        couplings = {}
        for gate, dot in spec.targets:
            gi = grid.conductor_names.index(gate)
            couplings[(gate, dot)] = float(-cols[gi, dots.index(dot)])
        if base is None:
            base = couplings
        pct = {
            k: 100.0 * (couplings[k] - base[k]) / abs(base[k]) if base[k] else 0.0
            for k in couplings
        }
        table.rows.append(SweepRow(value=value, achieved=value,
                                   couplings=couplings, pct_change=pct))
    return table


def relative_deltas(baseline: CapacitanceMatrix, perturbed: CapacitanceMatrix,
                    floor_af=0.01) -> np.ndarray:
    """Entrywise percent change (perturbed - baseline)/|baseline| * 100.

    Entries with |baseline| below the floor are masked as NaN.
    """
    if baseline.names != perturbed.names:
        raise KeyError("conductor registries differ between matrices")
    b, p = baseline.values, perturbed.values
    out = np.full_like(b, np.nan)
    sel = np.abs(b) >= floor_af
    out[sel] = 100.0 * (p[sel] - b[sel]) / np.abs(b[sel])
    return out


def parallel_plate_estimate(solid, gate: str, dot: str) -> float:
    """Planar-stack estimate C = eps0 * A_overlap / sum(d_i / eps_i) in aF.

    A_overlap is the lateral overlap of the two conductor footprints; the
    dielectric stack is sampled along a vertical line through the overlap.
    Reported alongside the 3D value to quantify the planar-approximation
    error; it ignores fringing and screening entirely.
    """
    for name in (gate, dot):
        if name not in solid.conductors:
            raise KeyError(f"unknown conductor {name!r}")
    (x0, x1), (y0, y1), _ = solid.domain_box
    domain = shapely_box(x0, y0, x1, y1)
    fp_gate = solid.footprints.get(gate) or domain
    fp_dot = solid.footprints.get(dot) or domain
    overlap = fp_gate.intersection(fp_dot)
    if overlap.is_empty or overlap.area <= 0:
        raise GeometryError(f"{gate!r} has no vertical overlap with {dot!r}")
    rep = overlap.representative_point()

    column = solid.column_intervals(rep.x, rep.y)
    gate_idx = solid.conductors.index(gate) + 1
    dot_idx = solid.conductors.index(dot) + 1
    dot_top = max((b for a, b, _m, c in column if c == dot_idx), default=None)
    gate_bot = min((a for a, b, _m, c in column if c == gate_idx and a >= (dot_top or -1e30)),
                   default=None)
    if dot_top is None or gate_bot is None or gate_bot <= dot_top:
        raise GeometryError(f"{gate!r} does not lie vertically above {dot!r}")

    d_over_eps = 0.0
    for a, b, m, c in column:
        lo, hi = max(a, dot_top), min(b, gate_bot)
        if hi <= lo:
            continue
        if c not in (0, dot_idx, gate_idx):
            raise GeometryError(
                f"conductor {solid.conductors[c - 1]!r} lies between {dot!r} and {gate!r}"
            )
        if c == 0:
            d_over_eps += (hi - lo) / solid.materials[m].relative_permittivity
    if d_over_eps <= 0:
        raise GeometryError("no dielectric between the conductors")
    return EPS0_AF_PER_NM * overlap.area / d_over_eps
