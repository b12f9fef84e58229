"""Quality functionals, degeneracy reports and refinement study estimators"""
from dataclasses import asdict, dataclass, field
import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import config
from .assembly import EvalCache, QuadratureRule
from .constants import TANGENT_TOLERANCE
from .errors import CompatibilityError, InputError
from .maps import GeometryMap
from .utils import det2

logger = logging.getLogger(__name__)
logger.setLevel(config.LOG_LEVEL)


# Reference square corners in local vertex order
CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])

# Returned by ``convergence_rate`` when the finer increment vanishes
EXACT_RECOVERY = math.inf


@dataclass
class QualityReport:
    winslow: float
    winslow_degenerate: bool
    area_multipatch: float
    interface_jump: float
    boundary_orth: float
    detj_min: float
    detj_max: float
    detj_mu_min: float
    detj_mu_max: float
    detj_vertex_min: float
    detj_vertex_max: float
    negative_point_count: int
    sample_count: int

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class BijectivityReport:
    """Extrema of det J over a dense sample.  Sampling based, so a positive minimum does not certify bijectivity."""
    min_det: float
    max_det: float
    argmin: Tuple[int, int, Tuple[float, float]]
    negative_count: int
    sample_count: int
    dense_order: int

    def as_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        patch, element, mu = self.argmin
        out["argmin"] = {"patch": patch, "element": element, "mu": list(mu)}
        return out


@dataclass
class RatioReport:
    """Candidate over reference ratios of the quality functionals"""
    nu_area: float
    nu_gamma: float
    nu_perp: float
    nu_detj: float
    nu_detj_reference: float
    extra: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _cache(m: GeometryMap, quad_order: Optional[int]) -> EvalCache:
    return EvalCache.build(m.space, quad_order or m.space.degree + 2)


def _jacobians(m: GeometryMap, points) -> Tuple[np.ndarray, np.ndarray]:
    """Parametric and reference square Jacobians of ``m`` at ``points``"""
    ops = points.ops(m.space)
    J = np.stack([ops["d1"] @ m.coeffs, ops["d2"] @ m.coeffs], axis=-1)
    J_mu = np.stack([ops["m1"] @ m.coeffs, ops["m2"] @ m.coeffs], axis=-1)
    return J, J_mu


def winslow(m: GeometryMap, cache: Optional[EvalCache] = None) -> Tuple[float, bool]:
    """``int |J|_F^2 / det J``, ``(inf, True)`` if the map degenerates at a quadrature point"""
    cache = cache or _cache(m, None)
    J, _ = _jacobians(m, cache.cells)
    det = det2(J)
    if np.any(det <= 0):
        return math.inf, True
    return float(cache.cells.weights @ ((J ** 2).sum(axis=(1, 2)) / det)), False


def area_multipatch(m: GeometryMap, cache: Optional[EvalCache] = None) -> float:
    """Sum over patches of the reference square integral of ``(det d_mu x)^2``"""
    cache = cache or _cache(m, None)
    points = cache.cells
    _, J_mu = _jacobians(m, points)
    dmu = points.weights / np.abs(det2(points.mjac))
    return float(dmu @ det2(J_mu) ** 2)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.maximum(np.linalg.norm(v, axis=1), TANGENT_TOLERANCE)[:, None]


def interface_jump(m: GeometryMap, controlmap: Optional[GeometryMap] = None, cache: Optional[EvalCache] = None) -> float:
    """
    Jump of the normalised transverse reference derivative of ``m`` across interior facets, integrated along the
    facet images under ``controlmap`` (the facets themselves if omitted).
    """
    cache = cache or _cache(m, None)
    points = cache.facets
    if not len(points):
        return 0.0
    ops = points.ops(m.space)
    # outward derivatives of the two sides point in opposite directions across a smooth facet
    jump = _unit(ops["mn"] @ m.coeffs) + _unit(ops["mn_o"] @ m.coeffs)
    weights = points.weights
    if controlmap is not None:
        r_ops = points.ops(controlmap.space)
        dr = (
            (r_ops["d1"] @ controlmap.coeffs) * points.tangents[:, :1]
            + (r_ops["d2"] @ controlmap.coeffs) * points.tangents[:, 1:]
        )
        weights = weights * np.linalg.norm(dr, axis=1)
    return float(math.sqrt(weights @ (jump ** 2).sum(axis=1)))


def boundary_orthogonality(m: GeometryMap, cache: Optional[EvalCache] = None) -> float:
    """Defect of orthogonality between the tangential and transverse reference derivatives along the boundary"""
    cache = cache or _cache(m, None)
    points = cache.boundary
    if not len(points):
        return 0.0
    ops = points.ops(m.space)
    cosine = (_unit(ops["mt"] @ m.coeffs) * _unit(ops["mn"] @ m.coeffs)).sum(axis=1)
    return float(math.sqrt(points.weights @ cosine ** 2))


def corner_point(corner: int, offset: Optional[float] = None) -> np.ndarray:
    """Reference square point next to a local corner, moved inward by ``offset``"""
    offset = config.VERTEX_OFFSET if offset is None else offset
    c = CORNERS[corner]
    return (c + offset * (1.0 - 2.0 * c))[None, :]


def vertex_limits(
    m: GeometryMap, reference: Optional[GeometryMap] = None, offset: Optional[float] = None
) -> Dict[int, List[float]]:
    """
    One-sided limits of the Jacobian determinant at every patch vertex, one value per adjacent patch.  With a
    ``reference`` controlmap the determinant is taken with respect to its coordinates.
    """
    q = m.space.quadrangulation
    limits: Dict[int, List[float]] = {}
    for patch, vertices in enumerate(q.patches):
        for corner, v in enumerate(vertices):
            mu = corner_point(corner, offset)
            det = float(m.det(patch, mu)[0])
            if reference is not None:
                det /= float(reference.det(patch, mu)[0])
            limits.setdefault(v, []).append(det)
    return limits


def metric_eigenvalue_at_vertex(m: GeometryMap, vertex: int, offset: Optional[float] = None) -> float:
    """Smallest eigenvalue of the metric tensor ``J^T J`` over the one-sided limits at ``vertex``"""
    q = m.space.quadrangulation
    values = []
    for patch, vertices in enumerate(q.patches):
        if vertex not in vertices:
            continue
        J = m.jacobian(patch, corner_point(vertices.index(vertex), offset))[0]
        values.append(np.linalg.eigvalsh(J.T @ J)[0])
    if not values:
        raise InputError(f"Vertex {vertex} belongs to no patch")
    return float(min(values))


def quality_report(
    m: GeometryMap, controlmap: Optional[GeometryMap] = None, quad_order: Optional[int] = None
) -> QualityReport:
    cache = _cache(m, quad_order)
    J, J_mu = _jacobians(m, cache.cells)
    det, det_mu = det2(J), det2(J_mu)
    value, degenerate = winslow(m, cache)
    if degenerate:
        logger.warning(f"Map degenerates at {int((det <= 0).sum())} quadrature points, Winslow reported as inf")
    limits = [v for values in vertex_limits(m, controlmap).values() for v in values]
    return QualityReport(
        winslow=value,
        winslow_degenerate=degenerate,
        area_multipatch=area_multipatch(m, cache),
        interface_jump=interface_jump(m, controlmap, cache),
        boundary_orth=boundary_orthogonality(m, cache),
        detj_min=float(det.min()),
        detj_max=float(det.max()),
        detj_mu_min=float(det_mu.min()),
        detj_mu_max=float(det_mu.max()),
        detj_vertex_min=float(min(limits)),
        detj_vertex_max=float(max(limits)),
        negative_point_count=int((det <= 0).sum()),
        sample_count=len(det),
    )


def bijectivity_report(m: GeometryMap, dense_order: Optional[int] = None, mu_variant: bool = False) -> BijectivityReport:
    """
    Sample ``det J`` (or ``det d_mu x``) at the abscissae of a dense Gauss-Legendre rule, ``2p + 3`` points per
    direction and element by default.  Ties of the minimum resolve to the smallest (patch, element, point).
    """
    p = m.space.degree
    dense_order = dense_order or 2 * p + 3
    if dense_order < p + 2:
        raise InputError(f"Dense sampling order must be at least {p + 2}, got {dense_order}")
    rule = QuadratureRule(dense_order)
    best = (math.inf, (0, 0, (0.0, 0.0)))
    largest = -math.inf
    negative = 0
    total = 0
    for patch, basis in enumerate(m.space.bases):
        mu, _, elements = rule.cell_points(basis)
        det = m.det_mu(patch, mu) if mu_variant else m.det(patch, mu)
        k = int(np.argmin(det))
        if det[k] < best[0]:
            best = (float(det[k]), (patch, int(elements[k]), (float(mu[k, 0]), float(mu[k, 1]))))
        largest = max(largest, float(det.max()))
        negative += int((det <= 0).sum())
        total += len(det)
    return BijectivityReport(best[0], largest, best[1], negative, total, dense_order)


def convergence_rate(e1: float, e2: float) -> float:
    """``log2(e1 / e2)`` for consecutive H1 increments of a dyadic refinement study"""
    if e1 < 0 or e2 < 0:
        raise InputError(f"Increments must be nonnegative, got {e1} and {e2}")
    if e2 == 0:
        return EXACT_RECOVERY
    if e1 == 0:
        raise InputError("Coarse increment vanishes while the fine one does not")
    return math.log2(e1 / e2)


def _common_space(a: GeometryMap, b: GeometryMap) -> Tuple[GeometryMap, GeometryMap]:
    if a.space is b.space:
        return a, b
    try:
        if a.space.dimension <= b.space.dimension:
            return a.prolong(b.space), b
        return a, b.prolong(a.space)
    except CompatibilityError as e:
        raise InputError(f"Cannot compare maps on non-nested spaces: {e.message}") from e


def h1_distance(a: GeometryMap, b: GeometryMap, quad_order: Optional[int] = None) -> float:
    """H1 norm of ``a - b`` over the parametric domain, evaluated on the finer of two nested spaces"""
    a, b = _common_space(a, b)
    cache = _cache(a, quad_order)
    points = cache.cells
    ops = points.ops(a.space)
    diff = a.coeffs - b.coeffs
    integrand = sum(((ops[k] @ diff) ** 2).sum(axis=1) for k in ("val", "d1", "d2"))
    return float(math.sqrt(max(points.weights @ integrand, 0.0)))


def refinement_rate(maps: Sequence[GeometryMap]) -> float:
    """Rate estimate from the last three levels of a dyadic refinement sequence"""
    if len(maps) < 3:
        raise InputError(f"A rate estimate needs three refinement levels, got {len(maps)}")
    coarse, middle, fine = maps[-3:]
    return convergence_rate(h1_distance(coarse, middle), h1_distance(middle, fine))


def detj_ratio(m: GeometryMap, dense_order: Optional[int] = None) -> float:
    """Ratio of the largest to the smallest ``det d_mu x`` over a dense sample"""
    report = bijectivity_report(m, dense_order, mu_variant=True)
    if report.min_det <= 0:
        return math.inf
    return report.max_det / report.min_det


def _ratio(candidate: float, reference: float) -> float:
    if reference == 0:
        return math.nan if candidate == 0 else math.inf
    return candidate / reference


def ratio_report(
    reference: GeometryMap,
    candidate: GeometryMap,
    controlmap: Optional[GeometryMap] = None,
    quad_order: Optional[int] = None,
    dense_order: Optional[int] = None,
) -> RatioReport:
    """Improvement of ``candidate`` over ``reference``, ratios below one mean the candidate is better"""
    ref_cache, cand_cache = _cache(reference, quad_order), _cache(candidate, quad_order)
    out = RatioReport(
        nu_area=_ratio(area_multipatch(candidate, cand_cache), area_multipatch(reference, ref_cache)),
        nu_gamma=_ratio(interface_jump(candidate, controlmap, cand_cache), interface_jump(reference, controlmap, ref_cache)),
        nu_perp=_ratio(boundary_orthogonality(candidate, cand_cache), boundary_orthogonality(reference, ref_cache)),
        nu_detj=detj_ratio(candidate, dense_order),
        nu_detj_reference=detj_ratio(reference, dense_order),
    )
    logger.info(f"Ratios: area {out.nu_area:.4g}, interfaces {out.nu_gamma:.4g}, boundary {out.nu_perp:.4g}")
    return out
