"""Process recipes and 3D device-solid construction.

A device is described by a JSON recipe: named materials, named 2D mask
layouts (polygons in nm), and an ordered list of fabrication steps that are
replayed bottom-up (planar growth, patterned deposition, conformal
deposition, patterned etch, buried conductor sheets).  The result is a
DeviceSolid that maps any point to a material and optionally a named
conductor; it is the geometric ground truth consumed by grid generation.

Internally the solid is a stack of per-step layers over a fine lateral
raster.  Each layer stores a bottom and top height per lateral pixel, so
conformal coatings over stepped topography are represented exactly up to
the raster resolution.  Conformal deposition is a morphological dilation of
the height field by a Euclidean ball, evaluated with per-level 2D distance
transforms.
"""

from __future__ import annotations

import ast
import json
import math
from dataclasses import dataclass, field

import numpy as np
import shapely
from scipy.ndimage import distance_transform_edt
from shapely.geometry import MultiPolygon, Polygon as ShapelyPolygon, box as shapely_box
from shapely.ops import unary_union

STEP_KINDS = (
    "planar_film",
    "patterned_deposit",
    "conformal_deposit",
    "etch_pattern",
    "conductor_sheet",
)

AIR = "air"  # reserved material name, relative permittivity 1


class RecipeError(ValueError):
    """Raised for malformed or inconsistent recipe documents."""


class GeometryError(ValueError):
    """Raised for invalid geometric operations (collapsed offsets, overlaps)."""


# ---------------------------------------------------------------------------
# Parameter expressions

_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div)
_ALLOWED_UNARY = (ast.USub, ast.UAdd)


def eval_expression(expr, parameters, where=""):
    """Evaluate a numeric field that may be an arithmetic expression string.

    Expressions may use +, -, *, /, parentheses, numbers and parameter names,
    e.g. ``"-(1.5*barrier_gap + island_length)"``.
    """
    if isinstance(expr, (int, float)) and not isinstance(expr, bool):
        return float(expr)
    if not isinstance(expr, str):
        raise RecipeError(f"{where}: expected number or expression, got {expr!r}")
    src = expr.lstrip("$")  # tolerate a leading $ on bare parameter names
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise RecipeError(f"{where}: bad expression {expr!r}: {exc.msg}") from None

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id not in parameters:
                raise RecipeError(f"{where}: unresolved parameter {node.id!r}")
            return float(parameters[node.id])
        if isinstance(node, ast.BinOp) and isinstance(node.op, _ALLOWED_BINOPS):
            a, b = ev(node.left), ev(node.right)
            if isinstance(node.op, ast.Add):
                return a + b
            if isinstance(node.op, ast.Sub):
                return a - b
            if isinstance(node.op, ast.Mult):
                return a * b
            return a / b
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, _ALLOWED_UNARY):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        raise RecipeError(f"{where}: unsupported syntax in expression {expr!r}")

    return ev(tree)


# ---------------------------------------------------------------------------
# Domain types

class Polygon2D:
    """Simple closed polygon in the lateral (x, y) plane, coordinates in nm.

    Vertices are normalized to counterclockwise order with no repeated
    closing vertex.  Self-intersecting or degenerate rings are rejected.
    """

    __slots__ = ("vertices",)

    def __init__(self, vertices):
        pts = [(float(x), float(y)) for x, y in vertices]
        if len(pts) >= 2 and pts[0] == pts[-1]:
            pts = pts[:-1]
        if len(pts) < 3:
            raise GeometryError("polygon needs at least 3 vertices")
        for x, y in pts:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise GeometryError("polygon has non-finite coordinates")
        sp = ShapelyPolygon(pts)
        if not sp.is_valid:
            raise GeometryError("polygon is not simple (self-intersecting or degenerate)")
        if sp.area <= 0:
            raise GeometryError("polygon has zero area")
        if not sp.exterior.is_ccw:
            pts = pts[::-1]
        self.vertices = tuple(pts)

    @property
    def area(self):
        return self.to_shapely().area

    @property
    def bounds(self):
        return self.to_shapely().bounds

    def to_shapely(self) -> ShapelyPolygon:
        return ShapelyPolygon(self.vertices)

    @classmethod
    def from_shapely(cls, sp: ShapelyPolygon) -> "Polygon2D":
        return cls(list(sp.exterior.coords))

    def __eq__(self, other):
        return isinstance(other, Polygon2D) and self.vertices == other.vertices

    def __repr__(self):
        return f"Polygon2D({len(self.vertices)} vertices, area={self.area:.1f} nm^2)"


@dataclass(frozen=True)
class MaskLayout:
    """Named collection of polygons on one layer; overlaps merge to a union."""

    name: str
    polygons: tuple
    layer_tag: str = ""

    def union(self):
        return unary_union([p.to_shapely() for p in self.polygons])


@dataclass(frozen=True)
class Material:
    name: str
    relative_permittivity: float = 1.0
    is_conductor: bool = False


@dataclass(frozen=True)
class ProcessStep:
    kind: str
    material: str = ""
    thickness_nm: float = 0.0  # depth_nm for conductor_sheet steps
    mask: str | None = None
    conductor: str | None = None
    # patterned_deposit only: coat sidewalls like a conformal film clipped to
    # the mask (CVD plus patterned etch-back) instead of a vertical extrusion
    conformal_sidewalls: bool = False


@dataclass
class ProcessRecipe:
    """Fully resolved recipe: all parameter expressions substituted."""

    name: str
    materials: dict          # name -> Material (declaration order preserved)
    masks: dict              # name -> MaskLayout
    steps: list              # list[ProcessStep]
    domain_box: tuple        # ((x0,x1), (y0,y1), (z0,z1))
    parameters: dict
    raster_nm: float = 2.0
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def conductors(self):
        """Conductor registry: names in declaration (step) order."""
        return [s.conductor for s in self.steps if s.conductor]

    def with_parameters(self, **overrides) -> "ProcessRecipe":
        """Re-resolve the raw document with some parameters replaced."""
        for key in overrides:
            if key not in self.parameters:
                raise RecipeError(f"unknown parameter {key!r}")
        params = dict(self.raw.get("parameters", {}))
        params.update(overrides)
        doc = dict(self.raw)
        doc["parameters"] = params
        return _resolve_recipe(doc, self.name)


# ---------------------------------------------------------------------------
# Polygon offsetting

def offset_polygon(poly: Polygon2D, delta_nm: float) -> Polygon2D:
    """Minkowski offset of a polygon ring by ``delta_nm``.

    Positive delta grows outward, negative shrinks.  Joins are mitered with
    a miter limit of 2x delta, falling back to beveling beyond the limit.
    """
    if delta_nm == 0:
        return poly
    grown = poly.to_shapely().buffer(
        delta_nm, join_style="mitre", mitre_limit=2.0, cap_style="flat"
    )
    if grown.is_empty:
        raise GeometryError(f"offset by {delta_nm} nm collapsed the polygon to empty")
    if isinstance(grown, MultiPolygon):
        raise GeometryError(f"offset by {delta_nm} nm split the polygon into {len(grown.geoms)} parts")
    if grown.interiors:
        raise GeometryError(f"offset by {delta_nm} nm produced a ring with holes")
    return Polygon2D.from_shapely(grown)


# ---------------------------------------------------------------------------
# Recipe loading

_NUMEXPR = {"type": ["number", "string"]}

RECIPE_SCHEMA = {
    "type": "object",
    "required": ["domain_box", "materials", "steps"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "raster_nm": {"type": "number", "exclusiveMinimum": 0},
        "domain_box": {
            "type": "object",
            "required": ["x", "y", "z"],
            "additionalProperties": False,
            "properties": {
                ax: {"type": "array", "items": _NUMEXPR, "minItems": 2, "maxItems": 2}
                for ax in ("x", "y", "z")
            },
        },
        "parameters": {"type": "object", "additionalProperties": {"type": "number"}},
        "materials": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "relative_permittivity": {"type": "number"},
                    "is_conductor": {"type": "boolean"},
                },
            },
        },
        "masks": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["polygons"],
                "additionalProperties": False,
                "properties": {
                    "layer": {"type": "string"},
                    "polygons": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "array",
                            "minItems": 3,
                            "items": {
                                "type": "array",
                                "items": _NUMEXPR,
                                "minItems": 2,
                                "maxItems": 2,
                            },
                        },
                    },
                },
            },
        },
        "steps": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["kind"],
                "additionalProperties": False,
                "properties": {
                    "kind": {"enum": list(STEP_KINDS)},
                    "material": {"type": "string"},
                    "thickness_nm": _NUMEXPR,
                    "depth_nm": _NUMEXPR,
                    "mask": {"type": "string"},
                    "conductor": {"type": "string"},
                    "conformal_sidewalls": {"type": "boolean"},
                },
            },
        },
    },
}


def load_recipe(document: str, name: str = "") -> ProcessRecipe:
    """Parse and fully resolve a recipe document (JSON text)."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise RecipeError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return _resolve_recipe(doc, name)


def load_recipe_file(path) -> ProcessRecipe:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return load_recipe(text, name=str(path))


def load_masks(document: str, parameters=None) -> dict:
    """Parse a standalone masks document (``{"masks": {...}}``)."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise RecipeError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if "masks" not in doc:
        raise RecipeError("masks document missing 'masks' block")
    return _parse_masks(doc["masks"], parameters or {})


def _parse_masks(block, params):
    masks = {}
    for mname, mdef in block.items():
        polys = []
        for ip, ring in enumerate(mdef["polygons"]):
            where = f"masks.{mname}.polygons[{ip}]"
            pts = [
                (eval_expression(x, params, where), eval_expression(y, params, where))
                for x, y in ring
            ]
            try:
                polys.append(Polygon2D(pts))
            except GeometryError as exc:
                raise RecipeError(f"{where}: {exc}") from None
        masks[mname] = MaskLayout(name=mname, polygons=tuple(polys), layer_tag=mdef.get("layer", ""))
    return masks


def _resolve_recipe(doc: dict, name: str) -> ProcessRecipe:
    import jsonschema

    validator = jsonschema.Draft202012Validator(RECIPE_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "$" + "".join(
            f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path
        )
        raise RecipeError(f"schema violation at {path}: {err.message}")

    params = dict(doc.get("parameters", {}))

    materials = {}
    for i, mdef in enumerate(doc["materials"]):
        mname = mdef["name"]
        if mname in materials or mname == AIR:
            raise RecipeError(f"materials[{i}]: duplicate material name {mname!r}")
        is_cond = bool(mdef.get("is_conductor", False))
        eps = float(mdef.get("relative_permittivity", 1.0))
        if not is_cond and eps < 1.0:
            raise RecipeError(
                f"materials[{i}].relative_permittivity: must be >= 1 for dielectrics, got {eps}"
            )
        materials[mname] = Material(mname, eps, is_cond)

    masks = _parse_masks(doc.get("masks", {}), params)

    dom = doc["domain_box"]
    def _axis(axname):
        lo = eval_expression(dom[axname][0], params, f"domain_box.{axname}[0]")
        hi = eval_expression(dom[axname][1], params, f"domain_box.{axname}[1]")
        if not hi > lo:
            raise RecipeError(f"domain_box.{axname}: extent must be strictly positive")
        return (lo, hi)
    domain_box = (_axis("x"), _axis("y"), _axis("z"))

    steps = []
    seen_conductors = set()
    for i, sdef in enumerate(doc["steps"]):
        where = f"steps[{i}]"
        kind = sdef["kind"]
        thick_key = "depth_nm" if kind == "conductor_sheet" else "thickness_nm"
        if thick_key not in sdef:
            raise RecipeError(f"{where}.{thick_key}: required for kind {kind!r}")
        thickness = eval_expression(sdef[thick_key], params, f"{where}.{thick_key}")
        if not thickness > 0:
            raise RecipeError(f"{where}.{thick_key}: must be positive, got {thickness}")
        mask = sdef.get("mask")
        conductor = sdef.get("conductor")
        material = sdef.get("material", "")
        if kind == "etch_pattern":
            material = ""
        elif not material:
            raise RecipeError(f"{where}.material: required for kind {kind!r}")
        if material and material != AIR and material not in materials:
            raise RecipeError(f"{where}.material: unknown material {material!r}")
        if kind in ("patterned_deposit", "etch_pattern", "conductor_sheet") and not mask:
            raise RecipeError(f"{where}.mask: required for kind {kind!r}")
        if kind in ("planar_film", "conformal_deposit") and mask:
            raise RecipeError(f"{where}.mask: not allowed for kind {kind!r}")
        if mask and mask not in masks:
            raise RecipeError(f"{where}.mask: unknown mask {mask!r}")
        if kind == "conductor_sheet" and not conductor:
            raise RecipeError(f"{where}.conductor: required for kind {kind!r}")
        if conductor:
            if conductor in seen_conductors:
                raise RecipeError(f"{where}.conductor: conductor {conductor!r} declared twice")
            seen_conductors.add(conductor)
        if material and material in materials and materials[material].is_conductor and not conductor:
            raise RecipeError(
                f"{where}.conductor: material {material!r} is a conductor, step needs a conductor name"
            )
        sidewalls = bool(sdef.get("conformal_sidewalls", False))
        if sidewalls and kind != "patterned_deposit":
            raise RecipeError(f"{where}.conformal_sidewalls: only valid for patterned_deposit")
        steps.append(ProcessStep(kind, material, thickness, mask, conductor, sidewalls))

    if steps[0].kind != "planar_film":
        raise RecipeError("steps[0]: first step must be a planar_film substrate spanning the domain")

    recipe = ProcessRecipe(
        name=doc.get("name", name or "recipe"),
        materials=materials,
        masks=masks,
        steps=steps,
        domain_box=domain_box,
        parameters=params,
        raster_nm=float(doc.get("raster_nm", 2.0)),
        raw=doc,
    )
    return recipe


# ---------------------------------------------------------------------------
# Solid construction

@dataclass
class _Layer:
    """One deposited/carved slab: occupies bottom < z <= top within mask."""

    step_index: int
    material_index: int
    conductor_index: int       # 0 = none
    bottom: object             # scalar or float32 (nx, ny) array
    top: object
    mask: object = None        # bool (nx, ny) array, None = everywhere

    def bottom_at(self, flat_idx):
        return self.bottom if np.isscalar(self.bottom) else self.bottom.ravel()[flat_idx]

    def top_at(self, flat_idx):
        return self.top if np.isscalar(self.top) else self.top.ravel()[flat_idx]

    def mask_at(self, flat_idx):
        return True if self.mask is None else self.mask.ravel()[flat_idx]


def _axis_centers(lo, hi, delta, edge_coords, _depth=0):
    """Pixel centers for one lateral axis.

    The phase is restricted to 0.5 or 1.0 so the center set stays symmetric
    under mirroring of a symmetric domain; if mask edges coincide with the
    centers for both phases (mixed integer/half-integer edges), the pixel
    size is halved instead, which shifts centers to quarter offsets.
    """
    n = max(1, int(round((hi - lo) / delta)))
    best = None
    for phase in (0.5, 1.0):
        centers = lo + delta * (np.arange(n) + phase)
        centers = centers[centers < hi + 0.5 * delta - 1e-12]
        hits = 0
        for e in edge_coords:
            frac = (e - lo) / delta - phase
            if abs(frac - round(frac)) < 1e-9:
                hits += 1
        if best is None or hits < best[0]:
            best = (hits, centers)
        if hits == 0:
            return centers
    if _depth < 2:
        return _axis_centers(lo, hi, delta / 2, edge_coords, _depth + 1)
    return best[1]


def _dilate_height(h, radius, dx, dy, max_levels=256):
    """Morphological dilation of height field ``h`` by a Euclidean ball.

    h'(p) = max over q of h(q) + sqrt(radius^2 - |p-q|^2), evaluated by
    thresholding per-level 2D distance transforms.  Levels are the exact
    distinct heights when few, otherwise quantized to ``max_levels`` bins
    (the quantization only lowers sloped parts of the result, flats stay
    exact).
    """
    vals = np.unique(h)
    if len(vals) > max_levels:
        lo, hi = float(vals[0]), float(vals[-1])
        q = (hi - lo) / max_levels
        hq = lo + np.floor((h - lo) / q) * q
        vals = np.unique(hq)
    else:
        hq = h
    out = h + radius  # own-column top coverage, exact everywhere
    nx, ny = h.shape
    rx = int(math.ceil(radius / dx)) + 2
    ry = int(math.ceil(radius / dy)) + 2
    # Each level set {hq >= v} contributes v + sqrt(r^2 - d^2) within lateral
    # distance r of itself; inside the set that is already covered by h + r.
    for v in vals[1:]:
        inside = hq >= v - 1e-9
        if not inside.any():
            continue
        ix, iy = np.nonzero(inside)
        x0, x1 = max(ix.min() - rx, 0), min(ix.max() + rx + 1, nx)
        y0, y1 = max(iy.min() - ry, 0), min(iy.max() + ry + 1, ny)
        sub = inside[x0:x1, y0:y1]
        if sub.all():
            continue
        d = distance_transform_edt(~sub, sampling=(dx, dy))
        reach = d <= radius
        contrib = np.where(reach, v + np.sqrt(np.maximum(radius * radius - d * d, 0.0)), -np.inf)
        region = out[x0:x1, y0:y1]
        np.maximum(region, np.where(sub, region, contrib), out=region)
    return out


class DeviceSolid:
    """Immutable volumetric model: point -> (material, conductor or none)."""

    def __init__(self, recipe, materials, conductors, layers, px_x, px_y,
                 interface_z, x_planes, y_planes, z_planes, footprints):
        self.recipe = recipe
        self.materials = materials            # list[Material], index 0 = air
        self.conductors = conductors          # registry, declaration order
        self._layers = layers
        self._px_x = px_x
        self._px_y = px_y
        self.interface_z = interface_z
        self.x_planes = x_planes
        self.y_planes = y_planes
        self.z_planes = z_planes
        self.footprints = footprints          # conductor -> shapely geometry or None
        self.domain_box = recipe.domain_box

    @property
    def material_names(self):
        return [m.name for m in self.materials]

    def _pixel_flat_index(self, xs, ys):
        dx = self._px_x[1] - self._px_x[0] if len(self._px_x) > 1 else 1.0
        dy = self._px_y[1] - self._px_y[0] if len(self._px_y) > 1 else 1.0
        ix = np.clip(np.round((np.asarray(xs) - self._px_x[0]) / dx).astype(np.int64), 0, len(self._px_x) - 1)
        iy = np.clip(np.round((np.asarray(ys) - self._px_y[0]) / dy).astype(np.int64), 0, len(self._px_y) - 1)
        return ix * len(self._px_y) + iy

    def label_points(self, xs, ys, zs):
        """Vectorized query: material index and conductor index per point."""
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        ys = np.atleast_1d(np.asarray(ys, dtype=float))
        zs = np.atleast_1d(np.asarray(zs, dtype=float))
        flat = self._pixel_flat_index(xs, ys)
        mat = np.zeros(xs.shape, dtype=np.int16)
        cond = np.zeros(xs.shape, dtype=np.int16)
        for layer in self._layers:
            sel = (zs > layer.bottom_at(flat)) & (zs <= layer.top_at(flat))
            if layer.mask is not None:
                sel &= layer.mask_at(flat)
            mat[sel] = layer.material_index
            cond[sel] = layer.conductor_index
        return mat, cond

    def query(self, x, y, z):
        """Point query returning (material name, conductor name or None)."""
        mat, cond = self.label_points([x], [y], [z])
        cname = self.conductors[cond[0] - 1] if cond[0] > 0 else None
        return self.materials[mat[0]].name, cname

    def label_grid(self, xc, yc, zc):
        """Label a rectilinear grid of cell centroids.

        Returns (material, conductor) int16 arrays of shape (len(xc),
        len(yc), len(zc)).
        """
        nx, ny, nz = len(xc), len(yc), len(zc)
        gx, gy = np.meshgrid(xc, yc, indexing="ij")
        flat = self._pixel_flat_index(gx.ravel(), gy.ravel())
        zs = np.asarray(zc, dtype=float)
        mat = np.zeros((nx * ny, nz), dtype=np.int16)
        cond = np.zeros((nx * ny, nz), dtype=np.int16)
        for layer in self._layers:
            bot = layer.bottom_at(flat)
            top = layer.top_at(flat)
            sel = (zs[None, :] > np.asarray(bot).reshape(-1, 1)) & (
                zs[None, :] <= np.asarray(top).reshape(-1, 1)
            )
            if layer.mask is not None:
                sel &= layer.mask_at(flat).reshape(-1, 1)
            mat[sel] = layer.material_index
            cond[sel] = layer.conductor_index
        return mat.reshape(nx, ny, nz), cond.reshape(nx, ny, nz)

    def conductor_zspan(self, name):
        """(zmin, zmax) over all layers of the named conductor."""
        idx = self.conductors.index(name) + 1
        lo, hi = math.inf, -math.inf
        for layer in self._layers:
            if layer.conductor_index != idx:
                continue
            b = layer.bottom if np.isscalar(layer.bottom) else float(np.min(layer.bottom))
            t = layer.top if np.isscalar(layer.top) else float(np.max(layer.top))
            lo, hi = min(lo, b), max(hi, t)
        return lo, hi

    def column_intervals(self, x, y):
        """Material column at one lateral point: [(z0, z1, material_index,
        conductor_index)] in ascending z covering the whole domain height."""
        z0, z1 = self.domain_box[2]
        flat = self._pixel_flat_index([x], [y])
        breaks = {z0, z1}
        for layer in self._layers:
            if layer.mask is not None and not bool(layer.mask_at(flat)[0]):
                continue
            breaks.add(float(np.asarray(layer.bottom_at(flat)).ravel()[0]))
            breaks.add(float(np.asarray(layer.top_at(flat)).ravel()[0]))
        zs = sorted(b for b in breaks if z0 <= b <= z1)
        out = []
        for a, b in zip(zs[:-1], zs[1:]):
            if b - a <= 1e-12:
                continue
            mid = 0.5 * (a + b)
            m, c = self.label_points([x], [y], [mid])
            if out and out[-1][2] == int(m[0]) and out[-1][3] == int(c[0]):
                out[-1] = (out[-1][0], b, int(m[0]), int(c[0]))
            else:
                out.append((a, b, int(m[0]), int(c[0])))
        return out


def build_solid(recipe: ProcessRecipe) -> DeviceSolid:
    """Replay the recipe steps in order and return the resulting solid."""
    (x0, x1), (y0, y1), (z0, z1) = recipe.domain_box
    delta = recipe.raster_nm

    edge_x, edge_y = set(), set()
    for layout in recipe.masks.values():
        for poly in layout.polygons:
            vs = poly.vertices
            for (ax, ay), (bx, by) in zip(vs, vs[1:] + vs[:1]):
                if ax == bx:
                    edge_x.add(ax)
                if ay == by:
                    edge_y.add(ay)

    px_x = _axis_centers(x0, x1, delta, sorted(edge_x))
    px_y = _axis_centers(y0, y1, delta, sorted(edge_y))
    nx, ny = len(px_x), len(px_y)
    dx_px = px_x[1] - px_x[0] if nx > 1 else delta
    dy_px = px_y[1] - px_y[0] if ny > 1 else delta

    materials = [Material(AIR, 1.0, False)] + list(recipe.materials.values())
    mat_index = {m.name: i for i, m in enumerate(materials)}
    conductors = recipe.conductors
    cond_index = {c: i + 1 for i, c in enumerate(conductors)}

    gx, gy = np.meshgrid(px_x, px_y, indexing="ij")

    mask_cache = {}

    def raster_mask(mask_name):
        if mask_name not in mask_cache:
            geom = recipe.masks[mask_name].union()
            gb = geom.bounds
            if gb[0] < x0 - 1e-9 or gb[1] < y0 - 1e-9 or gb[2] > x1 + 1e-9 or gb[3] > y1 + 1e-9:
                raise GeometryError(f"mask {mask_name!r} extends outside domain_box")
            m = np.zeros((nx, ny), dtype=bool)
            ix0 = np.searchsorted(px_x, gb[0] - delta)
            ix1 = np.searchsorted(px_x, gb[2] + delta)
            iy0 = np.searchsorted(px_y, gb[1] - delta)
            iy1 = np.searchsorted(px_y, gb[3] + delta)
            sub = shapely.contains_xy(geom, gx[ix0:ix1, iy0:iy1].ravel(), gy[ix0:ix1, iy0:iy1].ravel())
            m[ix0:ix1, iy0:iy1] = sub.reshape(ix1 - ix0, iy1 - iy0)
            mask_cache[mask_name] = m
        return mask_cache[mask_name]

    h = float(z0)               # current surface height, scalar or (nx, ny)
    layers = []
    interface_z = None
    sheet_union = np.zeros((nx, ny), dtype=bool)
    # Flat interface heights are tracked structurally: every step maps the
    # set of flat surface heights to a new set (deposits shift them by the
    # thickness, patterned steps keep the uncovered ones).  Conformal
    # corner rounding never produces flats, so it contributes nothing.
    z_candidates = {round(z0, 6), round(z1, 6)}
    surf_refs = {z0}

    def record_z(value):
        z_candidates.add(round(float(value), 6))

    def live_refs(surface, refs, where=None):
        """Reference heights that actually occur on the (masked) surface."""
        if np.isscalar(surface):
            return {surface}
        sel = surface if where is None else surface[where]
        if sel.size == 0:
            return set()
        return {v for v in refs if bool((np.abs(sel - v) < 1e-6).any())}

    for istep, step in enumerate(recipe.steps):
        mat_i = mat_index.get(step.material, 0)
        cond_i = cond_index.get(step.conductor, 0)
        t = step.thickness_nm

        if step.kind == "planar_film":
            bottom = h if np.isscalar(h) else h.astype(np.float32)
            top = h + t if np.isscalar(h) else (h + t).astype(np.float32)
            layers.append(_Layer(istep, mat_i, cond_i, bottom, top, None))
            h = h + t
            surf_refs = live_refs(h, {v + t for v in surf_refs})

        elif step.kind == "patterned_deposit":
            m = raster_mask(step.mask)
            if np.isscalar(h) and not step.conformal_sidewalls:
                bottom, top = h, h + t
                h = np.where(m, h + t, h).astype(np.float64) if m.any() else h
            else:
                h_arr = np.full((nx, ny), h, dtype=np.float64) if np.isscalar(h) else h
                if step.conformal_sidewalls:
                    grown = _dilate_height(h_arr, t, dx_px, dy_px)
                else:
                    grown = h_arr + t
                bottom = h_arr.astype(np.float32)
                top = grown.astype(np.float32)
                h = np.where(m, grown, h_arr)
            layers.append(_Layer(istep, mat_i, cond_i, bottom, top, m))
            prev_refs = surf_refs
            if np.isscalar(h):
                surf_refs = prev_refs | {h + t}
            else:
                under = live_refs(bottom if not np.isscalar(bottom) else h, prev_refs, m)
                surf_refs = live_refs(h, prev_refs) | {v + t for v in under}

        elif step.kind == "conformal_deposit":
            h_arr = np.full((nx, ny), h, dtype=np.float64) if np.isscalar(h) else h
            h_new = _dilate_height(h_arr, t, dx_px, dy_px)
            np.clip(h_new, None, z1, out=h_new)
            layers.append(_Layer(istep, mat_i, cond_i,
                                 h_arr.astype(np.float32), h_new.astype(np.float32), None))
            h = h_new
            surf_refs = {v + t for v in live_refs(h_arr, surf_refs)}

        elif step.kind == "etch_pattern":
            m = raster_mask(step.mask)
            h_arr = np.full((nx, ny), h, dtype=np.float64) if np.isscalar(h) else h
            new_h = np.where(m, np.maximum(h_arr - t, z0), h_arr)
            for layer in layers:
                bot = np.full((nx, ny), layer.bottom, dtype=np.float32) if np.isscalar(layer.bottom) else layer.bottom
                top = np.full((nx, ny), layer.top, dtype=np.float32) if np.isscalar(layer.top) else layer.top
                top = np.where(m, np.minimum(top, new_h.astype(np.float32)), top)
                bot = np.minimum(bot, top)
                layer.bottom, layer.top = bot, top
            h = new_h
            under = live_refs(h_arr, surf_refs, m)
            surf_refs = live_refs(new_h, surf_refs) | {max(v - t, z0) for v in under}

        elif step.kind == "conductor_sheet":
            if interface_z is None:
                raise GeometryError("conductor_sheet before any substrate step")
            m = raster_mask(step.mask)
            if (m & sheet_union).any():
                raise GeometryError(
                    f"conductor_sheet mask {step.mask!r} overlaps an existing conductor sheet"
                )
            sheet_union |= m
            bottom, top = interface_z - t, interface_z
            if bottom < z0 - 1e-9:
                raise GeometryError(f"conductor_sheet {step.conductor!r} extends below the domain")
            layers.append(_Layer(istep, mat_i, cond_i, bottom, top, m))
            record_z(bottom)
            record_z(top)

        for v in surf_refs:
            if z0 <= v <= z1:
                record_z(v)
        if istep == 0:
            interface_z = float(h) if np.isscalar(h) else float(np.max(h))
            record_z(interface_z)

    # lateral snap planes: axis-aligned mask edges plus domain bounds
    x_planes = sorted({x0, x1} | {e for e in edge_x if x0 <= e <= x1})
    y_planes = sorted({y0, y1} | {e for e in edge_y if y0 <= e <= y1})
    z_planes = sorted(v for v in z_candidates if z0 <= v <= z1)

    footprints = {}
    for step in recipe.steps:
        if step.conductor:
            footprints[step.conductor] = recipe.masks[step.mask].union() if step.mask else None

    return DeviceSolid(
        recipe=recipe,
        materials=materials,
        conductors=conductors,
        layers=layers,
        px_x=px_x,
        px_y=px_y,
        interface_z=interface_z,
        x_planes=np.array(x_planes),
        y_planes=np.array(y_planes),
        z_planes=np.array(z_planes),
        footprints=footprints,
    )


# ---------------------------------------------------------------------------
# Solid validation

@dataclass
class SolidReport:
    conductor_count: int
    bounding_boxes: dict      # name -> (xmin, xmax, ymin, ymax, zmin, zmax)
    shorts: list              # [(name_a, name_b)]
    warnings: list

    @property
    def ok(self):
        return not self.shorts

    def __str__(self):
        lines = [f"conductors: {self.conductor_count}"]
        for name, bb in self.bounding_boxes.items():
            lines.append(
                f"  {name}: x [{bb[0]:.6g}, {bb[1]:.6g}]  y [{bb[2]:.6g}, {bb[3]:.6g}]"
                f"  z [{bb[4]:.6g}, {bb[5]:.6g}]"
            )
        for a, b in self.shorts:
            lines.append(f"SHORT: {a} touches {b}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines)


def validate_solid(solid: DeviceSolid) -> SolidReport:
    """Diagnostic pass: conductor bounding boxes, shorted pairs, warnings."""
    nx, ny = len(solid._px_x), len(solid._px_y)
    dx = solid._px_x[1] - solid._px_x[0] if nx > 1 else 1.0
    dy = solid._px_y[1] - solid._px_y[0] if ny > 1 else 1.0

    by_cond = {}
    for layer in solid._layers:
        if layer.conductor_index > 0:
            by_cond.setdefault(layer.conductor_index, []).append(layer)

    boxes = {}
    for ci, lys in sorted(by_cond.items()):
        name = solid.conductors[ci - 1]
        xmin = ymin = zmin = math.inf
        xmax = ymax = zmax = -math.inf
        for layer in lys:
            if layer.mask is None:
                ix = np.arange(nx)
                iy = np.arange(ny)
                sel = None
            else:
                ix, iy = np.nonzero(layer.mask)
                if len(ix) == 0:
                    continue
                sel = layer.mask
            xmin = min(xmin, solid._px_x[np.min(ix)] - dx / 2)
            xmax = max(xmax, solid._px_x[np.max(ix)] + dx / 2)
            ymin = min(ymin, solid._px_y[np.min(iy)] - dy / 2)
            ymax = max(ymax, solid._px_y[np.max(iy)] + dy / 2)
            bot = layer.bottom if np.isscalar(layer.bottom) else float(
                np.min(layer.bottom[sel] if sel is not None else layer.bottom))
            top = layer.top if np.isscalar(layer.top) else float(
                np.max(layer.top[sel] if sel is not None else layer.top))
            zmin, zmax = min(zmin, bot), max(zmax, top)
        boxes[name] = (xmin, xmax, ymin, ymax, zmin, zmax)

    def _full(layer, arr):
        return np.full((nx, ny), arr, dtype=np.float32) if np.isscalar(arr) else arr

    shorts = []
    names = sorted(by_cond)
    eps = 1e-9
    for ia, ca in enumerate(names):
        for cb in names[ia + 1:]:
            touching = False
            for la in by_cond[ca]:
                for lb in by_cond[cb]:
                    ba, ta = _full(la, la.bottom), _full(la, la.top)
                    bb, tb = _full(lb, lb.bottom), _full(lb, lb.top)
                    ma = la.mask if la.mask is not None else np.ones((nx, ny), dtype=bool)
                    mb = lb.mask if lb.mask is not None else np.ones((nx, ny), dtype=bool)
                    both = ma & mb
                    if both.any():
                        ov = (np.maximum(ba, bb) <= np.minimum(ta, tb) + eps) & both
                        if ov.any():
                            touching = True
                    if not touching:
                        # lateral adjacency along x and y
                        for sh_ax in (0, 1):
                            m1 = ma & np.roll(mb, 1, axis=sh_ax)
                            m1[(0,) if sh_ax == 0 else (slice(None), 0)] = False
                            if m1.any():
                                bb_s = np.roll(bb, 1, axis=sh_ax)
                                tb_s = np.roll(tb, 1, axis=sh_ax)
                                ov = (np.maximum(ba, bb_s) < np.minimum(ta, tb_s) - eps) & m1
                                if ov.any():
                                    touching = True
                                    break
                    if touching:
                        break
                if touching:
                    break
            if touching:
                shorts.append((solid.conductors[ca - 1], solid.conductors[cb - 1]))

    warnings = []
    if not by_cond:
        warnings.append("solid contains no conductors")

    return SolidReport(
        conductor_count=len(by_cond),
        bounding_boxes=boxes,
        shorts=shorts,
        warnings=warnings,
    )
