"""qdcap: capacitance extraction workbench for silicon quantum-dot devices.

Pipeline: process recipe -> DeviceSolid -> VoxelGrid -> field solves ->
Maxwell capacitance matrix, with a semi-classical 2DEG density solver for
refining the quantum-dot conductor geometry and sensitivity sweeps for
process-variation analysis.
"""

from .capmatrix import (
    CapacitanceMatrix,
    check_matrix,
    couplings_to,
    extract_matrix,
    lever_arm,
)
from .constants import EPS0_AF_PER_NM
from .density import (
    DensityMap,
    DensityParams,
    DotRegion,
    extract_contour,
    interface_grid_spec,
    promote_to_conductor,
    solve_thomas_fermi,
    strip_sheet_conductors,
)
from .field import assemble, conductor_charges, drive_vector, solve, unit_drive
from .geometry import (
    DeviceSolid,
    GeometryError,
    MaskLayout,
    Material,
    Polygon2D,
    ProcessRecipe,
    ProcessStep,
    RecipeError,
    build_solid,
    load_recipe,
    load_recipe_file,
    offset_polygon,
    validate_solid,
)
from .grid import GridError, GridSpec, VoxelGrid, generate_grid, grid_report, refine
from .sensitivity import SweepSpec, parallel_plate_estimate, relative_deltas, sweep

__version__ = "0.1.0"

__all__ = [
    "CapacitanceMatrix", "DensityMap", "DensityParams", "DeviceSolid",
    "DotRegion", "EPS0_AF_PER_NM", "GeometryError", "GridError", "GridSpec",
    "MaskLayout", "Material", "Polygon2D", "ProcessRecipe", "ProcessStep",
    "RecipeError", "SweepSpec", "VoxelGrid", "assemble", "build_solid",
    "check_matrix", "conductor_charges", "couplings_to", "drive_vector",
    "extract_contour", "extract_matrix", "generate_grid", "grid_report",
    "interface_grid_spec", "lever_arm", "load_recipe", "load_recipe_file",
    "offset_polygon", "parallel_plate_estimate", "promote_to_conductor",
    "refine", "relative_deltas", "solve", "solve_thomas_fermi",
    "strip_sheet_conductors", "sweep", "unit_drive", "validate_solid",
]
