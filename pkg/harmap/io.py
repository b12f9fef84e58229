"""
Geometry and solution documents, reparameterisation recipes, SVG isoline plots and sampled grid export.

Geometry files are JSON objects with the fields of ``GeometryDocument``::

    {
      "version": "harmap-geometry/1",
      "name": "lbend",
      "vertices": [[0.0, 0.0], ...],
      "patches": [[0, 1, 4, 5], ...],
      "boundary_sides": [[[0, "south"], [1, "south"]], ...],
      "orientation": {"0": "south"},
      "correspondences": {
        "default": {
          "target": "polygon",
          "curves": [{"degree": 1, "knots": [0.0, 0.0, 0.5, 1.0, 1.0], "points": [[0.0, 2.0], ...]}, ...],
          "breaks": [[0.0, 0.5, 1.0], ...]
        }
      },
      "default_correspondence": "default"
    }

Boundary sides list their patch edges counterclockwise and carry one curve each.  ``breaks`` splits each curve's
parameter range among the edges of its side and defaults to a uniform split.
"""
from dataclasses import dataclass, field
from enum import Enum
import hashlib
import logging
from typing import Any, Dict, List, Literal, Optional, Tuple

import affine
import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator
import xmltodict

from . import config
from .constants import GEOMETRY_VERSION, SOLUTION_VERSION, Edge, ReparamMode, TargetDomain
from .control import ControlMap
from .errors import InputError, SchemaError, UnsupportedVersionError
from .maps import GeometryMap
from .splines import KnotVector, SplineCurve
from .topology import BoundaryCorrespondence, MultipatchSpace, Quadrangulation, build_space, build_topology

logger = logging.getLogger(__name__)
logger.setLevel(config.LOG_LEVEL)

RECIPE_VERSION = "harmap-recipe/1"

EdgeName = Literal["south", "east", "north", "west"]


class _Document(BaseModel):
    model_config = ConfigDict(extra="forbid")


class KnotVectorModel(_Document):
    degree: int
    knots: List[float]

    def build(self) -> KnotVector:
        return KnotVector(self.degree, tuple(self.knots))

    @classmethod
    def from_knot_vector(cls, kv: KnotVector) -> "KnotVectorModel":
        return cls(degree=kv.degree, knots=list(kv.knots))


class CurveModel(KnotVectorModel):
    points: List[Tuple[float, float]]

    def build(self) -> SplineCurve:
        return SplineCurve(super().build(), tuple(self.points))

    @classmethod
    def from_curve(cls, curve: SplineCurve) -> "CurveModel":
        return cls(degree=curve.kv.degree, knots=list(curve.kv.knots), points=[tuple(p) for p in curve.points])


class CorrespondenceModel(_Document):
    target: TargetDomain = TargetDomain.polygon
    curves: List[CurveModel]
    breaks: Optional[List[List[float]]] = None


class GeometryDocument(_Document):
    version: Literal[GEOMETRY_VERSION]
    name: str = ""
    description: str = ""
    vertices: List[Tuple[float, float]]
    patches: List[Tuple[int, int, int, int]]
    boundary_sides: List[List[Tuple[int, EdgeName]]]
    orientation: Optional[Dict[int, EdgeName]] = None
    correspondences: Dict[str, CorrespondenceModel]
    default_correspondence: str = "default"

    @model_validator(mode="after")
    def _check_references(self) -> "GeometryDocument":
        n = len(self.vertices)
        for i, patch in enumerate(self.patches):
            for k, v in enumerate(patch):
                if not 0 <= v < n:
                    raise ValueError(f"patches[{i}][{k}]: vertex id {v} outside 0..{n - 1}")
        for i, side in enumerate(self.boundary_sides):
            for k, (patch, _) in enumerate(side):
                if not 0 <= patch < len(self.patches):
                    raise ValueError(f"boundary_sides[{i}][{k}]: patch id {patch} outside 0..{len(self.patches) - 1}")
        for name, corr in self.correspondences.items():
            if len(corr.curves) != len(self.boundary_sides):
                raise ValueError(
                    f"correspondences.{name}.curves: {len(corr.curves)} curves for {len(self.boundary_sides)} sides"
                )
        if self.default_correspondence not in self.correspondences:
            raise ValueError(f"default_correspondence: '{self.default_correspondence}' is not a correspondence")
        return self

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()


class PatchSpaceModel(_Document):
    u: KnotVectorModel
    v: KnotVectorModel


class MapModel(_Document):
    coeffs: List[Tuple[float, float]]
    provenance: Dict[str, Any] = {}
    control: bool = False
    identity_boundary: bool = True
    target: TargetDomain = TargetDomain.polygon


class SolutionDocument(_Document):
    version: Literal[SOLUTION_VERSION]
    geometry_hash: str
    geometry: GeometryDocument
    correspondence: str
    space: List[PatchSpaceModel]
    maps: Dict[str, MapModel]
    provenance: Dict[str, Any] = {}
    report: Optional[Dict[str, Any]] = None

    @field_validator("maps")
    @classmethod
    def _needs_geometry(cls, maps: Dict[str, MapModel]) -> Dict[str, MapModel]:
        if "x" not in maps:
            raise ValueError("a solution holds at least the geometry map 'x'")
        return maps

    @model_validator(mode="after")
    def _check_hash(self) -> "SolutionDocument":
        if self.geometry.digest != self.geometry_hash:
            raise ValueError("geometry_hash: does not match the embedded geometry")
        return self


class RecipeStep(_Document):
    mode: ReparamMode
    options: Dict[str, Any] = {}


class RecipeDocument(_Document):
    version: Literal[RECIPE_VERSION]
    steps: List[RecipeStep]


def _validate(model, text: str, version_field: str = "version"):
    """Validate JSON ``text``, mapping pydantic errors onto schema errors that name the failing field"""
    try:
        return model.model_validate_json(text)
    except ValidationError as e:
        errors = e.errors()
        for err in errors:
            if tuple(err["loc"]) == (version_field,) and err["type"] == "literal_error":
                raise UnsupportedVersionError(
                    f"{version_field}: unsupported value {err.get('input')!r}, expected {err['ctx']['expected']}"
                ) from e
        lines = []
        for err in errors:
            loc = ".".join(str(part) for part in err["loc"])
            lines.append(f"{loc}: {err['msg']}" if loc else err["msg"])
        raise SchemaError("; ".join(lines)) from e


def plain(value: Any) -> Any:
    """Convert numpy scalars, arrays and enums nested in ``value`` into JSON types"""
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Enum):
        return value.value
    return value


def _edge(name: str) -> Edge:
    return Edge[name]


def geometry_from_document(
    doc: GeometryDocument, correspondence: Optional[str] = None
) -> Tuple[Quadrangulation, BoundaryCorrespondence, Dict[str, Any]]:
    name = correspondence or doc.default_correspondence
    if name not in doc.correspondences:
        raise InputError(f"Unknown correspondence '{name}', expected one of {sorted(doc.correspondences)}")
    corr = doc.correspondences[name]
    q = build_topology(
        doc.vertices,
        doc.patches,
        [[(patch, _edge(edge)) for patch, edge in side] for side in doc.boundary_sides],
        orientation=None if doc.orientation is None else {p: _edge(e) for p, e in doc.orientation.items()},
        target=corr.target,
    )
    F = BoundaryCorrespondence.from_curves(q, [c.build() for c in corr.curves], corr.breaks)
    metadata = {
        "name": doc.name,
        "description": doc.description,
        "correspondence": name,
        "correspondences": sorted(doc.correspondences),
        "hash": doc.digest,
    }
    return q, F, metadata


def parse_geometry(
    text: str, correspondence: Optional[str] = None
) -> Tuple[Quadrangulation, BoundaryCorrespondence, Dict[str, Any]]:
    """
    Parse a geometry document.  Schema violations raise ``SchemaError``, unknown version tags
    ``UnsupportedVersionError``, invalid connectivity ``TopologyError`` and incompatible boundary data
    ``CompatibilityError``.
    """
    doc = _validate(GeometryDocument, text)
    q, F, metadata = geometry_from_document(doc, correspondence)
    logger.info(f"Parsed geometry '{doc.name}' with {q.n_patches} patches, correspondence '{metadata['correspondence']}'")
    return q, F, metadata


def load_geometry_document(text: str) -> GeometryDocument:
    """Validated document keeping every named correspondence"""
    doc = _validate(GeometryDocument, text)
    for name in doc.correspondences:
        geometry_from_document(doc, name)
    return doc


def canonical_geometry(text: str) -> str:
    return load_geometry_document(text).model_dump_json(indent=2) + "\n"


def geometry_document(
    q: Quadrangulation,
    correspondences: Dict[str, BoundaryCorrespondence],
    name: str = "",
    description: str = "",
    default: Optional[str] = None,
    targets: Optional[Dict[str, TargetDomain]] = None,
) -> GeometryDocument:
    targets = targets or {}
    return GeometryDocument(
        version=GEOMETRY_VERSION,
        name=name,
        description=description,
        vertices=[tuple(v) for v in q.vertices.tolist()],
        patches=[tuple(p) for p in q.patches],
        boundary_sides=[[(patch, Edge(edge).name) for patch, edge in side] for side in q.boundary_sides],
        orientation={p: Edge(e).name for p, e in q.orientation.items()} or None,
        correspondences={
            key: CorrespondenceModel(
                target=targets.get(key, q.target),
                curves=[CurveModel.from_curve(c) for c in F.curves],
                breaks=[np.asarray(b, dtype=float).tolist() for b in F.breaks],
            )
            for key, F in correspondences.items()
        },
        default_correspondence=default or next(iter(correspondences)),
    )


def write_geometry(
    q: Quadrangulation,
    correspondences,
    name: str = "",
    description: str = "",
    default: Optional[str] = None,
    targets: Optional[Dict[str, TargetDomain]] = None,
) -> str:
    """Canonical geometry text, ``correspondences`` is one correspondence or a mapping of named ones"""
    if isinstance(correspondences, BoundaryCorrespondence):
        correspondences = {"default": correspondences}
    return geometry_document(q, correspondences, name, description, default, targets).model_dump_json(indent=2) + "\n"


@dataclass
class Solution:
    """A geometry map on its space, optionally with the controlmap ``s`` and reference controlmap ``r``"""
    quadrangulation: Quadrangulation
    correspondence: BoundaryCorrespondence
    metadata: Dict[str, Any]
    x: GeometryMap
    s: Optional[ControlMap] = None
    r: Optional[ControlMap] = None
    provenance: Dict[str, Any] = field(default_factory=dict)
    report: Optional[Dict[str, Any]] = None
    geometry: Optional[GeometryDocument] = None

    @property
    def space(self) -> MultipatchSpace:
        return self.x.space


def _map_model(m: GeometryMap) -> MapModel:
    control = isinstance(m, ControlMap)
    return MapModel(
        coeffs=[tuple(c) for c in m.coeffs.tolist()],
        provenance=plain(m.provenance),
        control=control,
        identity_boundary=m.identity_boundary if control else True,
        target=m.target if control else TargetDomain.polygon,
    )


def _map_from_model(space: MultipatchSpace, model: MapModel) -> GeometryMap:
    m = GeometryMap(space, np.asarray(model.coeffs, dtype=float), dict(model.provenance))
    if model.control:
        return ControlMap.from_map(m, identity_boundary=model.identity_boundary, target=model.target)
    return m


def write_solution(solution: Solution) -> str:
    """Solution text, numbers in shortest round-trip form so rewriting a parsed solution is byte-identical"""
    if solution.geometry is None:
        raise InputError("Solution carries no geometry document to embed")
    geometry = solution.geometry
    maps = {"x": _map_model(solution.x)}
    for key in ("s", "r"):
        m = getattr(solution, key)
        if m is not None:
            maps[key] = _map_model(m)
    doc = SolutionDocument(
        version=SOLUTION_VERSION,
        geometry_hash=geometry.digest,
        geometry=geometry,
        correspondence=solution.metadata.get("correspondence", geometry.default_correspondence),
        space=[
            PatchSpaceModel(u=KnotVectorModel.from_knot_vector(b.kv_u), v=KnotVectorModel.from_knot_vector(b.kv_v))
            for b in solution.space.bases
        ],
        maps=maps,
        provenance=plain(solution.provenance),
        report=plain(solution.report),
    )
    return doc.model_dump_json(indent=2) + "\n"


def parse_solution(text: str) -> Solution:
    doc = _validate(SolutionDocument, text)
    q, F, metadata = geometry_from_document(doc.geometry, doc.correspondence)
    if len(doc.space) != q.n_patches:
        raise SchemaError(f"space: {len(doc.space)} patch bases for {q.n_patches} patches")
    space = build_space(q, [(p.u.build(), p.v.build()) for p in doc.space])
    maps = {}
    for key, model in doc.maps.items():
        if len(model.coeffs) != space.dimension:
            raise SchemaError(f"maps.{key}.coeffs: {len(model.coeffs)} rows for a space of dimension {space.dimension}")
        maps[key] = _map_from_model(space, model)
    return Solution(
        q, F, metadata, maps["x"], maps.get("s"), maps.get("r"), dict(doc.provenance), doc.report, doc.geometry
    )


def parse_recipe(text: str) -> RecipeDocument:
    return _validate(RecipeDocument, text)


def write_recipe(steps: List[Tuple[ReparamMode, Dict[str, Any]]]) -> str:
    doc = RecipeDocument(version=RECIPE_VERSION, steps=[RecipeStep(mode=m, options=o) for m, o in steps])
    return doc.model_dump_json(indent=2) + "\n"


def _format(value: float) -> str:
    return f"{value:.6g}"


def _polyline(points: np.ndarray, transform: affine.Affine) -> Dict[str, str]:
    xs, ys = transform * (points[:, 0], points[:, 1])
    return {"@points": " ".join(f"{_format(x)},{_format(y)}" for x, y in zip(xs, ys))}


def isoline_levels(n: int) -> np.ndarray:
    return np.arange(1, n + 1) / (n + 1)


def export_svg(m: GeometryMap, isolines_per_patch: int = 9, samples_per_isoline: int = 50) -> str:
    """
    Plot the reference square isolines ``mu_k = j / (n + 1)`` of every patch as polylines, with patch boundaries
    stroked heavier.  The view box is the bounding box of all strokes with a 2% margin and the y axis pointing up.
    """
    if samples_per_isoline < 2:
        raise InputError(f"An isoline needs at least two samples, got {samples_per_isoline}")
    t = np.linspace(0.0, 1.0, samples_per_isoline)
    isolines, outlines = [], []
    drawn = set()
    q = m.space.quadrangulation
    for patch in range(m.space.n_patches):
        for axis in (0, 1):
            for level in isoline_levels(isolines_per_patch):
                mu = np.empty((len(t), 2))
                mu[:, axis] = level
                mu[:, 1 - axis] = t
                isolines.append(m.evaluate_mu(patch, mu))
        for edge in Edge:
            key = frozenset(q.edge_vertex_ids(patch, edge))
            if key in drawn:
                continue
            drawn.add(key)
            mu = np.empty((len(t), 2))
            fixed = 1 if edge in (Edge.south, Edge.north) else 0
            mu[:, fixed] = 0.0 if edge in (Edge.south, Edge.west) else 1.0
            mu[:, 1 - fixed] = t
            outlines.append(m.evaluate_mu(patch, mu))

    allpoints = np.vstack(isolines + outlines)
    (xmin, ymin), (xmax, ymax) = allpoints.min(axis=0), allpoints.max(axis=0)
    margin = 0.02 * max(xmax - xmin, ymax - ymin)
    # flip about the horizontal midline so the viewbox keeps the bounding box
    transform = affine.Affine.translation(0.0, ymin + ymax) * affine.Affine.scale(1.0, -1.0)
    width = 0.002 * max(xmax - xmin, ymax - ymin)
    view_box = (xmin - margin, ymin - margin, xmax - xmin + 2 * margin, ymax - ymin + 2 * margin)

    doc = {
        "svg": {
            "@xmlns": "http://www.w3.org/2000/svg",
            "@version": "1.1",
            "@viewBox": " ".join(_format(v) for v in view_box),
            "g": [
                {
                    "@id": "isolines",
                    "@fill": "none",
                    "@stroke": "black",
                    "@stroke-width": _format(width),
                    "polyline": [_polyline(p, transform) for p in isolines],
                },
                {
                    "@id": "patch-boundaries",
                    "@fill": "none",
                    "@stroke": "black",
                    "@stroke-width": _format(3 * width),
                    "polyline": [_polyline(p, transform) for p in outlines],
                },
            ],
        }
    }
    return xmltodict.unparse(doc, pretty=True)


GRID_HEADER = "patch mu1 mu2 x1 x2 detj_mu"


def export_grid(m: GeometryMap, n: int) -> str:
    """Rows ``patch mu1 mu2 x1 x2 det(d_mu x)`` on an ``n x n`` lattice per patch, ``mu1`` running fastest"""
    if n < 2:
        raise InputError(f"Grid export needs at least two samples per direction, got {n}")
    t = np.linspace(0.0, 1.0, n)
    uu, vv = np.meshgrid(t, t)
    mu = np.column_stack([uu.ravel(), vv.ravel()])
    rows = [GRID_HEADER]
    for patch in range(m.space.n_patches):
        x = m.evaluate_mu(patch, mu)
        det = m.det_mu(patch, mu)
        for (u, v), (x1, x2), d in zip(mu, x, det):
            rows.append(f"{patch} {u:.17g} {v:.17g} {x1:.17g} {x2:.17g} {d:.17g}")
    return "\n".join(rows) + "\n"
