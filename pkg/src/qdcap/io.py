"""Artifact serialization: matrix CSV, SPICE subcircuit, VTK, density maps.

All exports are byte-deterministic for identical inputs: fixed formatting,
no timestamps.  Matrix entries are written with 4 significant digits.
"""

from __future__ import annotations

import re

import numpy as np

from .capmatrix import CapacitanceMatrix, check_matrix

SPICE_FLOOR_AF = 0.01   # element floor; tables quote 0.01-0.1 aF


def _sig4(v: float) -> str:
    if v == 0:
        return "0"
    return f"{v:.4g}"


# ---------------------------------------------------------------------------
# Capacitance matrix CSV

def export_matrix_csv(C: CapacitanceMatrix) -> str:
    lines = []
    meta = C.metadata or {}
    shape = meta.get("grid_shape")
    if shape:
        lines.append(f"# grid_cells {meta.get('grid_cells')} shape {shape[0]}x{shape[1]}x{shape[2]}")
    if "tol" in meta:
        lines.append(f"# tol {meta['tol']:g}")
    lines.append(f"# asymmetry {C.asymmetry:.6e}")
    if "rowsum_max" in meta:
        lines.append(f"# rowsum_max_aF {meta['rowsum_max']:.6e}")
    lines.append("# units aF")
    lines.append("," + ",".join(C.names))
    for i, name in enumerate(C.names):
        lines.append(name + "," + ",".join(_sig4(v) for v in C.values[i]))
    return "\n".join(lines) + "\n"


def load_matrix_csv(text: str) -> CapacitanceMatrix:
    asym = 0.0
    meta = {}
    rows = []
    names_header = None
    row_names = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = re.match(r"#\s*asymmetry\s+([\d.eE+-]+)", line)
            if m:
                asym = float(m.group(1))
            m = re.match(r"#\s*tol\s+([\d.eE+-]+)", line)
            if m:
                meta["tol"] = float(m.group(1))
            continue
        cells = line.split(",")
        if names_header is None:
            names_header = [c for c in cells[1:]]
            continue
        row_names.append(cells[0])
        rows.append([float(v) for v in cells[1:]])
    if names_header is None or not rows:
        raise ValueError("matrix CSV has no data rows")
    if row_names != names_header:
        raise ValueError("matrix CSV row names do not match column names")
    values = np.array(rows)
    if values.shape[0] != values.shape[1]:
        raise ValueError(f"matrix CSV is not square: {values.shape}")
    return CapacitanceMatrix(values=values, names=names_header, asymmetry=asym, metadata=meta)


# ---------------------------------------------------------------------------
# SPICE subcircuit

def sanitize_node_names(names):
    """Non-alphanumerics become underscores; collisions get an index suffix."""
    out, seen = [], {}
    for name in names:
        node = re.sub(r"[^A-Za-z0-9]", "_", name) or "node"
        if node in seen:
            seen[node] += 1
            node = f"{node}_{seen[node]}"
        seen.setdefault(node, 0)
        out.append(node)
    return out


def export_spice(C: CapacitanceMatrix, name: str = "qdcap") -> str:
    """Generic SPICE3 subcircuit with one capacitor per mutual pair.

    Mutual capacitances below the 0.01 aF floor are dropped.  A matrix with
    positive off-diagonals is refused (malformed sign structure).
    """
    diag = check_matrix(C)
    if not diag.signs_ok:
        raise ValueError(
            "matrix sign structure invalid for SPICE export "
            f"({diag.positive_offdiag} positive off-diagonals, "
            f"{diag.nonpositive_diag} non-positive diagonals)"
        )
    nodes = sanitize_node_names(C.names)
    lines = [f".SUBCKT {name} " + " ".join(nodes)]
    n = C.n
    for i in range(n):
        for j in range(i + 1, n):
            val = -float(C.values[i, j])
            if val < SPICE_FLOOR_AF:
                continue
            lines.append(f"C{i + 1}_{j + 1} {nodes[i]} {nodes[j]} {_sig4(val)}aF")
    lines.append(".ENDS")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# VTK legacy ASCII rectilinear grid

def _vtk_coords(label, arr):
    return [f"{label}_COORDINATES {len(arr)} double",
            " ".join(f"{v:.9g}" for v in arr)]


def export_vtk(grid, field=None, title="qdcap grid") -> str:
    """Rectilinear grid with cell arrays material, conductor and optional phi."""
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET RECTILINEAR_GRID",
        f"DIMENSIONS {len(grid.x)} {len(grid.y)} {len(grid.z)}",
    ]
    lines += _vtk_coords("X", grid.x)
    lines += _vtk_coords("Y", grid.y)
    lines += _vtk_coords("Z", grid.z)
    lines.append(f"CELL_DATA {grid.n_cells}")

    def cell_array(name, data, kind, fmt):
        lines.append(f"SCALARS {name} {kind} 1")
        lines.append("LOOKUP_TABLE default")
        flat = data.ravel(order="F")  # VTK order: x fastest
        for start in range(0, len(flat), 9):
            lines.append(" ".join(fmt(v) for v in flat[start:start + 9]))

    cell_array("material", grid.material, "int", lambda v: str(int(v)))
    cell_array("conductor", grid.conductor, "int", lambda v: str(int(v)))
    if field is not None:
        phi = field.phi if hasattr(field, "phi") else field
        cell_array("phi", np.asarray(phi), "double", lambda v: f"{v:.9g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Density maps and contour documents

def export_density_csv(dmap) -> str:
    lines = ["x_nm,y_nm,n_s_cm2"]
    for i, xv in enumerate(dmap.x):
        for j, yv in enumerate(dmap.y):
            lines.append(f"{xv:.6g},{yv:.6g},{dmap.n_s[i, j]:.6g}")
    return "\n".join(lines) + "\n"


def export_contours(region, mask_name: str = "dot_c1") -> str:
    """Contour polygons as a masks document the recipe loader accepts.

    The dot polygon is emitted under ``mask_name``; remaining above-level
    polygons under ``<mask_name>_ext<i>``.
    """
    import json

    masks = {}
    ext = 0
    for cp in region.polygons:
        if not cp.above_level:
            continue
        if cp.is_dot:
            key = mask_name
        else:
            ext += 1
            key = f"{mask_name}_ext{ext}"
        masks[key] = {
            "layer": "2deg",
            "polygons": [[[round(float(x), 6), round(float(y), 6)]
                          for x, y in cp.polygon.vertices]],
        }
    doc = {"level_cm2": region.level, "masks": masks}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def export_sweep_csv(table) -> str:
    lines = ["parameter,requested,achieved,target,C_aF,pct_change"]
    for row in table.rows:
        for gate, dot in table.targets:
            lines.append(
                f"{table.parameter},{row.value:.6g},{row.achieved:.6g},"
                f"{gate}->{dot},{_sig4(row.couplings[(gate, dot)])},"
                f"{row.pct_change[(gate, dot)]:+.2f}"
            )
    return "\n".join(lines) + "\n"
