"""Controlmaps: reparameterisations of the parametric domain that steer the inversely harmonic geometry maps"""
from dataclasses import dataclass, field
import logging
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import isotonic_regression

from . import config
from .assembly import EvalCache, FieldLayout, QuadratureRule, SparseSystem, assemble, l2_project
from .constants import BOUNDARY_FRAMES, Edge, OrthVariant, TargetDomain
from .diffusivity import Diffusivity, check_spd, context_from_points, context_from_state
from .errors import CompatibilityError, ConvergenceError, GeometryError, InputError, TopologyError
from .maps import GeometryMap, identity_coefficients, operators
from .solvers import SolverConfig, field_jacobian, newton_driver, pulled_back_terms
from .splines import KnotVector, SplineCurve, TensorBasis, basis_matrix, interpolate_exact, transfer_coefficients
from .topology import (
    BoundaryCorrespondence,
    MultipatchSpace,
    Quadrangulation,
    bilinear_map,
    dirichlet_lift,
    edge_knot_vector,
    edge_local_dofs,
    edge_point,
)
from .utils import adj2, det2

logger = logging.getLogger(__name__)
logger.setLevel(config.LOG_LEVEL)


@dataclass
class ControlMap(GeometryMap):
    """
    Map from the parametric domain into the controlmap domain.  ``identity_boundary`` marks maps that leave
    the boundary of the parametric domain pointwise fixed.  ``boundary_functions`` holds, per boundary patch,
    the reparameterisation ``q`` of its boundary edge as ``(knot vector, coefficients)`` in frame coordinates.
    """
    identity_boundary: bool = True
    target: TargetDomain = TargetDomain.polygon
    boundary_functions: Dict[int, Tuple[KnotVector, np.ndarray]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        super().__post_init__()
        self.target = TargetDomain(self.target)

    @classmethod
    def from_map(cls, m: GeometryMap, **kwargs) -> "ControlMap":
        return cls(m.space, m.coeffs, dict(m.provenance), **kwargs)

    def check_boundary(self, tolerance: float = 1e-10):
        if not self.identity_boundary:
            return
        error = self.boundary_error(identity_coefficients(self.space))
        if error > tolerance:
            raise GeometryError(f"Controlmap is marked identity on the boundary but deviates by {error:.3e}")

    def min_det(self, cache: Optional[EvalCache] = None) -> float:
        cache = cache or EvalCache.build(self.space)
        ops = cache.cells.ops(self.space)
        J = np.stack([ops["d1"] @ self.coeffs, ops["d2"] @ self.coeffs], axis=-1)
        return float(det2(J).min())


def _gradients(m: GeometryMap, points) -> np.ndarray:
    """``[:, a, b] = d m_a / d xi_b`` at quadrature points"""
    ops = points.ops(m.space)
    return np.stack([ops["d1"] @ m.coeffs, ops["d2"] @ m.coeffs], axis=-1)


def _on_space(m: GeometryMap, space: MultipatchSpace) -> GeometryMap:
    return m if m.space is space else m.prolong(space)


def control_layout(space: MultipatchSpace) -> FieldLayout:
    return FieldLayout([("s1", space), ("s2", space)])


def solve_control_diffusion(
    space: MultipatchSpace,
    diffusivity: Diffusivity,
    boundary: Optional[BoundaryCorrespondence] = None,
    cfg: Optional[SolverConfig] = None,
    reference: Optional[GeometryMap] = None,
    geometry: Optional[GeometryMap] = None,
) -> ControlMap:
    """
    Controlmap solving ``div(D grad s_k) = 0`` on the controlmap domain of ``reference`` (the parametric domain
    if omitted), pulled back to the parametric domain.  Boundary data is ``boundary`` if given, else the trace of
    ``reference``, else the identity.  ``geometry`` supplies the frozen map that geometry-dependent diffusivities
    are evaluated on.
    """
    cfg = cfg or SolverConfig()
    cache = EvalCache.build(space, cfg.quad_order)
    points = cache.cells
    reference = _on_space(reference, space) if reference is not None else None

    ctx = context_from_points(points, geometry, reference)
    D = diffusivity.evaluate(ctx)
    check_spd(D, ctx)

    J = _gradients(reference, points) if reference is not None else np.broadcast_to(np.eye(2), (len(points), 2, 2))
    layout = control_layout(space)
    terms = pulled_back_terms("s", np.zeros((len(points), 2, 2)), J, D, grad_field="s")
    _, K = assemble(terms, layout, cache)

    if boundary is not None:
        lifted = dirichlet_lift(space, boundary)
    elif reference is not None:
        lifted = reference.coeffs
    else:
        lifted = identity_coefficients(space)
    dofs = space.boundary_dofs
    fixed = layout.mask({"s1": dofs, "s2": dofs})
    state = SparseSystem(K, np.zeros(layout.size), fixed, lifted.T.ravel()).solve()
    s = ControlMap.from_map(
        GeometryMap.from_state(space, state, source="control-diffusion", diffusivity=diffusivity.describe()),
        identity_boundary=boundary is None and reference is None,
        target=reference.target if isinstance(reference, ControlMap) else space.quadrangulation.target,
    )

    dets = det2(_gradients(s, points))
    if np.any(dets <= 0):
        logger.warning(
            f"Controlmap is degenerate at {int((dets <= 0).sum())} of {len(dets)} quadrature points "
            f"(min det {dets.min():.3e})"
        )
    logger.info(f"Controlmap from {type(diffusivity).__name__} diffusion on {space.dimension} basis functions")
    return s


def coupled_layout(space: MultipatchSpace) -> FieldLayout:
    return FieldLayout([("x1", space), ("x2", space), ("s1", space), ("s2", space)])


def _diffusivity_at(d: Diffusivity, ctx):
    if d.state_dependent:
        D, dD_dJ, dD_dval = d.linearise(ctx)
        return D, dD_dJ, dD_dval, "x"
    return d.evaluate(ctx), None, None, None


def coupled_evaluator(
    layout: FieldLayout,
    cache: EvalCache,
    eps: float,
    D_x: Diffusivity,
    D_s: Diffusivity,
    reference: GeometryMap,
):
    """Residual and Jacobian of the geometry equation under the controlmap plus the controlmap equation"""
    points = cache.cells
    J_r = _gradients(reference, points)

    def evaluate(state: np.ndarray, jacobian: bool = True):
        J = field_jacobian(layout, state, points, "x")
        S = field_jacobian(layout, state, points, "s")
        ctx = context_from_state(layout, state, points, reference=reference)
        D, dD_dJ, dD_dval, D_field = _diffusivity_at(D_x, ctx)
        terms = pulled_back_terms(
            "x", S, J, D, eps, grad_field="s", J_field="x", D_field=D_field, dD_dJ=dD_dJ, dD_dval=dD_dval
        )
        D, dD_dJ, dD_dval, D_field = _diffusivity_at(D_s, ctx)
        terms += pulled_back_terms(
            "s", S, J_r, D, grad_field="s", D_field=D_field, dD_dJ=dD_dJ, dD_dval=dD_dval
        )
        return assemble(terms, layout, cache, jacobian=jacobian)

    return evaluate


def solve_coupled(
    space: MultipatchSpace,
    D_x: Diffusivity,
    D_s: Diffusivity,
    reference: Tuple[GeometryMap, GeometryMap],
    cfg: Optional[SolverConfig] = None,
) -> Tuple[GeometryMap, ControlMap]:
    """
    Newton solution of the geometry and controlmap equations as one system, started from the reference pair
    ``(x^r, r)``.  The reference pair is nondegenerate so the smallest regularisation is used right away.
    """
    cfg = cfg or SolverConfig()
    x_ref, r = (_on_space(m, space) for m in reference)
    cache = EvalCache.build(space, cfg.quad_order)
    if np.any(det2(_gradients(x_ref, cache.cells)) <= 0):
        raise GeometryError("The reference geometry of the coupled system must be nondegenerate")
    layout = coupled_layout(space)
    dofs = space.boundary_dofs
    fixed = layout.mask({name: dofs for name in ("x1", "x2", "s1", "s2")})
    eps = cfg.eps_schedule[-1]
    newton = SolverConfig(**{**cfg.as_dict(), "linearisation": "newton"})
    state = np.concatenate([x_ref.state, r.state])
    evaluator = coupled_evaluator(layout, cache, eps, D_x, D_s, r)
    result = newton_driver(evaluator, state, newton, fixed, name="coupled")
    n = 2 * space.dimension
    provenance = dict(
        scheme="coupled", iterations=result.iterations, residual=result.residual_norm, eps=eps,
        diffusivity_x=D_x.describe(), diffusivity_s=D_s.describe(),
    )
    x = GeometryMap.from_state(space, result.state[:n], **provenance)
    s = ControlMap.from_map(
        GeometryMap.from_state(space, result.state[n:], **provenance),
        identity_boundary=isinstance(r, ControlMap) and r.identity_boundary,
        target=r.target if isinstance(r, ControlMap) else space.quadrangulation.target,
    )
    logger.info(f"Coupled system converged in {result.iterations} Newton iterations")
    return x, s


def coons_patch(
    south: SplineCurve,
    east: SplineCurve,
    north: SplineCurve,
    west: SplineCurve,
    basis: Optional[TensorBasis] = None,
    tolerance: float = 1e-10,
) -> np.ndarray:
    """
    Bilinearly blended Coons patch of four boundary curves, as local coefficients of ``basis`` (built from the
    south and west knot vectors if omitted).  South and north run along ``u``, west and east along ``v``.
    """
    basis = basis or TensorBasis(south.kv, west.kv)
    P00, P10, P11, P01 = south.start, south.end, north.end, north.start
    for name, a, b in (
        ("south/west", P00, west.start), ("south/east", P10, east.start),
        ("north/east", P11, east.end), ("north/west", P01, west.end),
    ):
        if np.linalg.norm(a - b) > tolerance:
            raise InputError(f"Coons patch curves do not meet at the {name} corner ({a.tolist()} vs {b.tolist()})")

    def on(curve: SplineCurve, kv: KnotVector) -> np.ndarray:
        if curve.kv.is_close(kv):
            return curve.control_points
        try:
            return transfer_coefficients(curve.kv, curve.control_points, kv)
        except CompatibilityError as e:
            raise InputError(f"Coons patch curve is not representable on the patch basis: {e.message}") from e

    S, N = on(south, basis.kv_u), on(north, basis.kv_u)
    W, E = on(west, basis.kv_v), on(east, basis.kv_v)
    gu = basis.kv_u.greville[:, None, None]
    gv = basis.kv_v.greville[None, :, None]
    # index [i, j] along (u, v), linear blends are exact through their Greville coefficients
    C = (
        (1 - gv) * S[:, None] + gv * N[:, None] + (1 - gu) * W[None] + gu * E[None]
        - (1 - gu) * (1 - gv) * P00 - gu * (1 - gv) * P10 - gu * gv * P11 - (1 - gu) * gv * P01
    )
    return np.swapaxes(C, 0, 1).reshape(-1, 2)


def _curve_on(kv: KnotVector, func: Callable[[np.ndarray], np.ndarray], exact: bool = True) -> SplineCurve:
    if exact:
        coeffs = interpolate_exact(func, kv)
    else:
        g = kv.greville
        coeffs = np.linalg.solve(basis_matrix(kv, g).toarray(), func(g))
    return SplineCurve(kv, tuple(map(tuple, coeffs)))


def _edge_curves(space: MultipatchSpace, patch: int, trace: Callable, exact: bool = True) -> List[SplineCurve]:
    """South, east, north and west curves of ``trace(edge, u)`` on the patch's edge knot vectors"""
    return [
        _curve_on(space.edge_knot_vector(patch, edge), lambda u, e=edge: trace(e, u), exact)
        for edge in (Edge.south, Edge.east, Edge.north, Edge.west)
    ]


def _assemble_patches(space: MultipatchSpace, local: Dict[int, np.ndarray]) -> np.ndarray:
    coeffs = identity_coefficients(space)
    for patch, c in local.items():
        coeffs[space.local_to_global[patch]] = c
    return coeffs


@dataclass
class BoundaryFrame:
    """Orientation preserving frame ``(tau, nu) = R mu + c`` of a boundary patch, its boundary edge at ``nu = 1``"""
    patch: int
    edge: Edge

    @property
    def R(self) -> np.ndarray:
        return np.asarray(BOUNDARY_FRAMES[self.edge][0])

    @property
    def c(self) -> np.ndarray:
        return np.asarray(BOUNDARY_FRAMES[self.edge][1])

    def to_frame(self, mu: np.ndarray) -> np.ndarray:
        return np.atleast_2d(mu) @ self.R.T + self.c

    def from_frame(self, tn: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(tn) - self.c) @ self.R

    def derivatives(self, dmu: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Tangential and transverse derivatives from reference square derivatives ``[:, a, b] = d f_a / d mu_b``"""
        return dmu @ self.R[0], dmu @ self.R[1]


def boundary_frames(q: Quadrangulation) -> List[BoundaryFrame]:
    frames = []
    for patch in q.boundary_patches():
        edges = [e for p, e in q.boundary_edges if p == patch]
        if len(edges) != 1:
            raise TopologyError(f"Boundary patch {patch} touches the boundary with {len(edges)} edges, expected one")
        frames.append(BoundaryFrame(patch, q.boundary_edge_of(patch)))
    return frames


def transverse_harmonic(
    x_ref: GeometryMap, frame: BoundaryFrame, order: Optional[int] = None, levels: Optional[int] = None
) -> Tuple[TensorBasis, np.ndarray]:
    """
    Local coefficients of ``f`` harmonic in the physical patch with ``f = tau`` on the three edges off the
    boundary and a vanishing normal derivative on the boundary edge.  Solved on the patch basis refined
    ``levels`` times, which is returned along with the coefficients.
    """
    levels = config.ORTH_REFINE if levels is None else levels
    if levels < 0:
        raise InputError(f"Refinement levels must be nonnegative, got {levels}")
    basis = x_ref.space.bases[frame.patch]
    for _ in range(levels):
        basis = basis.refine()
    mu, w, _ = QuadratureRule(order or basis.degree + 1).cell_points(basis)
    dmu_x = x_ref.jacobian_mu(frame.patch, mu)
    det = det2(dmu_x)
    if np.any(det <= 0):
        raise GeometryError(f"Reference geometry is degenerate in boundary patch {frame.patch}")
    adj = adj2(dmu_x)
    M = np.einsum("nij,nkj->nik", adj, adj) / det[:, None, None]
    grads = [basis.evaluate(mu, 1, 0), basis.evaluate(mu, 0, 1)]
    K = sum(
        grads[a].T @ (grads[b].multiply((w * M[:, a, b])[:, None])) for a in range(2) for b in range(2)
    ).tocsr()

    fixed = np.zeros(basis.dimension, dtype=bool)
    for edge in Edge:
        if edge != frame.edge:
            fixed[edge_local_dofs(basis, edge)] = True
    values = frame.to_frame(basis.greville())[:, 0]
    return basis, SparseSystem(K, np.zeros(basis.dimension), fixed, values).solve()


def monotone_fit(kv: KnotVector, t: np.ndarray, values: np.ndarray, min_slope: Optional[float] = None) -> np.ndarray:
    """
    Least-squares fit of samples of a reparameterisation of [0, 1] on ``kv``, made strictly increasing: the
    coefficients start at 0, end at 1 and grow by at least ``min_slope`` times the Greville spacing, which
    bounds the slope of the spline from below by ``min_slope``.
    """
    min_slope = config.ORTH_MIN_SLOPE if min_slope is None else min_slope
    if not 0 <= min_slope < 1:
        raise InputError(f"Slope floor must lie in [0, 1), got {min_slope}")
    B = basis_matrix(kv, np.asarray(t, dtype=float)).toarray()
    coeffs = np.linalg.lstsq(B, np.asarray(values, dtype=float), rcond=None)[0]
    g = kv.greville
    increasing = isotonic_regression((coeffs - min_slope * g) / (1 - min_slope)).x
    increasing = np.clip(increasing, 0.0, 1.0)
    coeffs = min_slope * g + (1 - min_slope) * increasing
    coeffs[0], coeffs[-1] = 0.0, 1.0
    return coeffs


def _fit_samples(kv: KnotVector) -> np.ndarray:
    return np.linspace(*kv.domain, 16 * kv.n + 1)


def boundary_function(
    x_ref: GeometryMap, frame: BoundaryFrame, order: Optional[int] = None, levels: Optional[int] = None
) -> Tuple[KnotVector, np.ndarray]:
    """Trace ``q(tau)`` of the transverse harmonic function on the boundary edge, fitted monotonically"""
    basis, f = transverse_harmonic(x_ref, frame, order, levels)
    fine = (edge_knot_vector(basis, frame.edge), f[edge_local_dofs(basis, frame.edge)])
    kv = x_ref.space.edge_knot_vector(frame.patch, frame.edge)
    tau0 = frame.to_frame(edge_point(frame.edge, [0.0]))[0, 0]
    if tau0 > 0.5:
        kv, fine = kv.reversed(), (fine[0].reversed(), fine[1][::-1])
    t = _fit_samples(kv)
    return kv, monotone_fit(kv, t, evaluate_boundary_function(fine, t))


def compose_boundary_functions(
    outer: Tuple[KnotVector, np.ndarray], inner: Tuple[KnotVector, np.ndarray]
) -> Tuple[KnotVector, np.ndarray]:
    """``outer o inner`` fitted on the knot vector of ``outer``"""
    kv = outer[0]
    t = _fit_samples(kv)
    return kv, monotone_fit(kv, t, evaluate_boundary_function(outer, evaluate_boundary_function(inner, t)))



def evaluate_boundary_function(q_fn: Tuple[KnotVector, np.ndarray], tau: np.ndarray, deriv: int = 0) -> np.ndarray:
    kv, coeffs = q_fn
    return basis_matrix(kv, np.clip(tau, *kv.domain), deriv) @ coeffs


def hermite_blend(tau: np.ndarray, nu: np.ndarray, q_values: np.ndarray) -> np.ndarray:
    """Blend equal to ``tau`` at ``nu = 0`` and to ``q`` at ``nu = 1``, with vanishing ``nu``-derivative at both"""
    return (1 + 2 * nu) * (1 - nu) ** 2 * tau + (3 - 2 * nu) * nu ** 2 * q_values


def check_monotone(q_fn: Tuple[KnotVector, np.ndarray], patch: int, samples: int = 201, tolerance: float = 1e-8):
    slope = evaluate_boundary_function(q_fn, np.linspace(0.0, 1.0, samples), deriv=1)
    if np.any(slope < -tolerance):
        logger.warning(f"Boundary reparameterisation of patch {patch} is not monotone (min slope {slope.min():.3e})")
        raise GeometryError(f"Boundary reparameterisation of patch {patch} is not monotone")



LayerFunction = Callable[[int, np.ndarray], np.ndarray]


def _boundary_patch_values(
    q: Quadrangulation,
    frame: BoundaryFrame,
    q_fn: Tuple[KnotVector, np.ndarray],
    mu: np.ndarray,
    variant: OrthVariant,
    layer: Optional[LayerFunction] = None,
) -> np.ndarray:
    """``m o lambda o nu o m^-1`` of a boundary patch at reference points ``mu``"""
    tn = frame.to_frame(mu)
    tau, nu = tn[:, 0], tn[:, 1]
    q_tau = evaluate_boundary_function(q_fn, tau)
    first = hermite_blend(tau, nu, q_tau) if variant == OrthVariant.t else q_tau
    second = nu if layer is None else layer_profile(layer(frame.patch, q_tau), nu)
    xi, _ = bilinear_map(q, frame.patch, frame.from_frame(np.column_stack([first, second])))
    return xi


def _reparameterised(
    space: MultipatchSpace,
    frames: List[BoundaryFrame],
    functions: Dict[int, Tuple[KnotVector, np.ndarray]],
    variant: OrthVariant,
    interior: Callable[[int, np.ndarray], np.ndarray],
    layer: Optional[LayerFunction] = None,
    cache: Optional[EvalCache] = None,
) -> np.ndarray:
    """L2 projection of a patchwise defined controlmap, boundary coefficients pinned to its exact trace"""
    q = space.quadrangulation
    cache = cache or EvalCache.build(space)
    by_patch = {fr.patch: fr for fr in frames}

    def values(patch: int, mu: np.ndarray) -> np.ndarray:
        if patch in by_patch:
            return _boundary_patch_values(q, by_patch[patch], functions[patch], mu, variant, layer)
        return interior(patch, mu)

    points = cache.cells
    data = np.empty((len(points), 2))
    for patch in np.unique(points.patch):
        sel = points.patch == patch
        data[sel] = values(int(patch), points.mu[sel])

    pinned = np.zeros((space.dimension, 2))
    for patch, edge in q.boundary_edges:
        kv = space.edge_knot_vector(patch, edge)
        pinned[space.edge_dofs(patch, edge)] = interpolate_exact(lambda u: values(patch, edge_point(edge, u)), kv)
    return l2_project(space, data, cache, fixed=space.boundary_dofs, fixed_values=pinned)


def _interior_fill(
    space: MultipatchSpace,
    frames: List[BoundaryFrame],
    functions: Dict[int, Tuple[KnotVector, np.ndarray]],
) -> Callable[[int, np.ndarray], np.ndarray]:
    """Coons fill of patches off the boundary from the reparameterised facet curves"""
    q = space.quadrangulation
    by_patch = {fr.patch: fr for fr in frames}
    neighbours = {}
    for f in q.interior_facets:
        neighbours[(f.patch_i, f.edge_i)] = (f.patch_j, f.edge_j, f.flip)
        neighbours[(f.patch_j, f.edge_j)] = (f.patch_i, f.edge_i, f.flip)
    local = {}
    for patch in range(q.n_patches):
        if patch in by_patch:
            continue

        def trace(edge, u, patch=patch):
            other, other_edge, flip = neighbours[(patch, edge)]
            if other not in by_patch:
                return bilinear_map(q, patch, edge_point(edge, u))[0]
            t = 1.0 - np.asarray(u) if flip else np.asarray(u)
            return _boundary_patch_values(q, by_patch[other], functions[other], edge_point(other_edge, t), OrthVariant.q)

        local[patch] = coons_patch(*_edge_curves(space, patch, trace), basis=space.bases[patch])

    def evaluate(patch: int, mu: np.ndarray) -> np.ndarray:
        return space.bases[patch].evaluate(mu) @ local[patch]

    return evaluate


def _identity_interior(space: MultipatchSpace) -> Callable[[int, np.ndarray], np.ndarray]:
    return lambda patch, mu: bilinear_map(space.quadrangulation, patch, mu)[0]


def boundary_orth_controlmap(
    x_ref: GeometryMap,
    variant: OrthVariant = OrthVariant.t,
    cfg: Optional[SolverConfig] = None,
    functions: Optional[Dict[int, Tuple[KnotVector, np.ndarray]]] = None,
) -> ControlMap:
    """
    Controlmap under which transverse isolines of boundary patches meet the physical boundary at a right angle.
    The ``t`` variant blends the boundary reparameterisation into the identity across each boundary patch and
    needs a bicubic space, the ``q`` variant shifts whole transverse isolines and Coons-fills the remaining patches.
    Precomputed boundary ``functions`` skip the harmonic solves on ``x_ref``.
    """
    cfg = cfg or SolverConfig()
    variant = OrthVariant(variant)
    space = x_ref.space
    if variant == OrthVariant.t and space.degree < 3:
        raise InputError(f"The t variant is exact on bicubic spaces only, got degree {space.degree}")
    frames = boundary_frames(space.quadrangulation)
    if functions is None:
        functions = {frame.patch: boundary_function(x_ref, frame, cfg.quad_order) for frame in frames}
    for frame in frames:
        check_monotone(functions[frame.patch], frame.patch)

    interior = _identity_interior(space) if variant == OrthVariant.t else _interior_fill(space, frames, functions)
    coeffs = _reparameterised(space, frames, functions, variant, interior, cache=EvalCache.build(space, cfg.quad_order))
    logger.info(f"Boundary orthogonalising controlmap ({variant.value} variant) over {len(frames)} boundary patches")
    return ControlMap(
        space, coeffs, {"source": "boundary-orth", "variant": variant.value},
        identity_boundary=False, target=space.quadrangulation.target, boundary_functions=functions,
    )


def update_orth_controlmap(x: GeometryMap, s: ControlMap, cfg: Optional[SolverConfig] = None) -> ControlMap:
    """
    Fixed-point update of an orthogonalising controlmap ``s`` from the geometry ``x`` recomputed under it: the
    boundary reparameterisation measured on ``x`` is composed into the one of ``s``.  It is the identity once
    the transverse isolines of ``x`` meet the boundary orthogonally.
    """
    cfg = cfg or SolverConfig()
    if s.provenance.get("source") != "boundary-orth" or not s.boundary_functions:
        raise InputError("Only orthogonalising controlmaps can be updated")
    x = _on_space(x, s.space)
    functions = {
        frame.patch: compose_boundary_functions(
            s.boundary_functions[frame.patch], boundary_function(x, frame, cfg.quad_order)
        )
        for frame in boundary_frames(s.space.quadrangulation)
    }
    updated = boundary_orth_controlmap(x, s.provenance["variant"], cfg, functions=functions)
    updated.provenance["iteration"] = s.provenance.get("iteration", 0) + 1
    return updated



def layer_profile(d: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """``(1 - exp(-d nu)) / (1 - exp(-d))``, tending to ``nu`` as ``d`` vanishes"""
    d = np.asarray(d, dtype=float)
    nu = np.asarray(nu, dtype=float)
    small = np.abs(d) < 1e-12
    safe = np.where(small, 1.0, d)
    return np.where(small, nu, np.expm1(-safe * nu) / np.expm1(-safe))


def layer_slope(d: np.ndarray) -> np.ndarray:
    """Transverse derivative of the layer profile at the boundary, ``d / (exp(d) - 1)``"""
    d = np.asarray(d, dtype=float)
    small = np.abs(d) < 1e-6
    safe = np.where(small, 1.0, d)
    return np.where(small, 1 - d / 2 + d ** 2 / 12, safe / np.expm1(safe))


def layer_slope_derivative(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    small = np.abs(d) < 1e-4
    safe = np.where(small, 1.0, d)
    em1 = np.expm1(safe)
    return np.where(small, -0.5 + d / 6, (em1 - safe * (em1 + 1)) / em1 ** 2)


def transverse_derivatives(x: GeometryMap, frames: List[BoundaryFrame], cache: EvalCache) -> np.ndarray:
    """Normal component of the transverse reference derivative of ``x`` at the boundary quadrature points"""
    points = cache.boundary
    by_patch = {fr.patch: fr for fr in frames}
    b = np.empty(len(points))
    for patch in np.unique(points.patch):
        sel = points.patch == patch
        dmu = x.jacobian_mu(int(patch), points.mu[sel])
        tangential, transverse = by_patch[int(patch)].derivatives(dmu)
        b[sel] = np.abs(tangential[:, 0] * transverse[:, 1] - tangential[:, 1] * transverse[:, 0]) / np.linalg.norm(
            tangential, axis=1
        )
    return b


def mean_transverse_derivative(x: GeometryMap, cache: Optional[EvalCache] = None) -> float:
    cache = cache or EvalCache.build(x.space)
    b = transverse_derivatives(x, boundary_frames(x.space.quadrangulation), cache)
    w = cache.boundary.weights
    return float(w @ b / w.sum())


def layer_operator(
    space: MultipatchSpace,
    frames: List[BoundaryFrame],
    functions: Dict[int, Tuple[KnotVector, np.ndarray]],
    cache: EvalCache,
):
    """Values of the boundary basis functions at the reparameterised images ``(q(tau), 1)`` of the boundary points"""
    points = cache.boundary
    by_patch = {fr.patch: fr for fr in frames}
    patches, mus = [], []
    for k in range(len(points)):
        frame = by_patch[int(points.patch[k])]
        tau = frame.to_frame(points.mu[k])[0, 0]
        q_tau = evaluate_boundary_function(functions[frame.patch], np.array([tau]))[0]
        patches.append(frame.patch)
        mus.append(frame.from_frame([[q_tau, 1.0]])[0])
    return operators(space, np.array(patches), np.array(mus))["val"][:, space.boundary_dofs]


def fit_layer_steepness(
    space: MultipatchSpace,
    frames: List[BoundaryFrame],
    functions: Dict[int, Tuple[KnotVector, np.ndarray]],
    b: np.ndarray,
    k_target: float,
    cache: EvalCache,
    cfg: SolverConfig,
) -> np.ndarray:
    """
    Gauss-Newton fit of the layer steepness ``d``, spanned by the basis functions living on the boundary, to
    ``min sum int (b f'(d) - k)^2``.  Returns global coefficients, zero off the boundary.
    """
    dofs = space.boundary_dofs
    Phi = layer_operator(space, frames, functions, cache)
    w = cache.boundary.weights

    def cost(d: np.ndarray) -> Tuple[float, np.ndarray]:
        r = b * layer_slope(Phi @ d) - k_target
        return float(w @ r ** 2), r

    d = np.ones(len(dofs))
    value, r = cost(d)
    trace = [{"iteration": 0, "cost": value}]
    for it in range(1, cfg.max_iter + 1):
        Jr = Phi.multiply((b * layer_slope_derivative(Phi @ d))[:, None]).tocsr()
        H = (Jr.T @ Jr.multiply(w[:, None])).toarray()
        g = Jr.T @ (w * r)
        H += 1e-12 * max(np.trace(H), 1e-300) * np.eye(len(d))
        step = np.linalg.solve(H, -g)
        t = 1.0
        while t >= cfg.min_step:
            trial_value, trial_r = cost(d + t * step)
            if trial_value <= value - cfg.armijo * t * abs(g @ step):
                break
            t *= cfg.line_search_factor
        else:
            raise ConvergenceError("Layer steepness line search stagnated", trace)
        d = d + t * step
        value, r = trial_value, trial_r
        trace.append({"iteration": it, "cost": value, "step": t})
        if np.linalg.norm(t * step) <= cfg.rel_tol * max(1.0, np.linalg.norm(d)) or value < cfg.abs_tol:
            break
    else:
        raise ConvergenceError("Layer steepness fit did not converge", trace)

    if np.any(d <= 0):
        logger.warning(
            f"Layer steepness is not positive at {int((d <= 0).sum())} boundary coefficients, "
            f"clamped to {config.LAYER_D_MIN}"
        )
        d = np.where(d <= 0, config.LAYER_D_MIN, d)
    out = np.zeros(space.dimension)
    out[dofs] = d
    return out


def boundary_layer_orthogonal(
    x_ref: GeometryMap,
    s_orth: ControlMap,
    k_target: float,
    cfg: Optional[SolverConfig] = None,
    b: Optional[np.ndarray] = None,
) -> ControlMap:
    """
    Compose a q-variant orthogonalising controlmap with exponential layer profiles along the transverse direction
    so the transverse derivative of the recomputed geometry at the boundary approaches ``k_target``.  The
    transverse derivatives ``b`` at the boundary quadrature points default to those of ``x_ref``.
    """
    cfg = cfg or SolverConfig()
    if not k_target > 0:
        raise InputError(f"Target transverse derivative must be positive, got {k_target}")
    if s_orth.provenance.get("variant") != OrthVariant.q.value or not s_orth.boundary_functions:
        raise InputError("Boundary layers compose with the q variant of the orthogonalising controlmap only")
    space = s_orth.space
    x_ref = _on_space(x_ref, space)
    cache = EvalCache.build(space, cfg.quad_order)
    frames = boundary_frames(space.quadrangulation)
    functions = s_orth.boundary_functions
    if b is None:
        b = transverse_derivatives(x_ref, frames, cache)
    elif len(b) != len(cache.boundary):
        raise CompatibilityError(f"Expected {len(cache.boundary)} transverse derivatives, got {len(b)}")

    d = fit_layer_steepness(space, frames, functions, b, k_target, cache, cfg)
    by_patch = {fr.patch: fr for fr in frames}

    def layer(patch: int, q_tau: np.ndarray) -> np.ndarray:
        mu = by_patch[patch].from_frame(np.column_stack([q_tau, np.ones_like(q_tau)]))
        return space.evaluate(patch, mu) @ d

    def interior(patch: int, mu: np.ndarray) -> np.ndarray:
        return s_orth.evaluate_mu(patch, mu)

    coeffs = _reparameterised(space, frames, functions, OrthVariant.q, interior, layer, cache)
    steepness = d[space.boundary_dofs]
    logger.info(f"Boundary layer controlmap, steepness in [{steepness.min():.3e}, {steepness.max():.3e}]")
    return ControlMap(
        space, coeffs,
        {"source": "boundary-layer-orth", "variant": OrthVariant.q.value, "k_target": float(k_target),
         "steepness": steepness.tolist()},
        identity_boundary=False, target=s_orth.target, boundary_functions=functions,
    )


def layer_corrected_derivatives(x: GeometryMap, s: ControlMap, cfg: Optional[SolverConfig] = None) -> np.ndarray:
    """
    Transverse derivatives of ``x``, recomputed under the layer controlmap ``s``, divided by the layer slopes
    of ``s``.  Refitting the steepness to these corrects for the discretisation error of the recomputation.
    """
    cfg = cfg or SolverConfig()
    if s.provenance.get("source") != "boundary-layer-orth":
        raise InputError("Expected a boundary layer controlmap")
    space = s.space
    cache = EvalCache.build(space, cfg.quad_order)
    frames = boundary_frames(space.quadrangulation)
    Phi = layer_operator(space, frames, s.boundary_functions, cache)
    slopes = layer_slope(Phi @ np.asarray(s.provenance["steepness"]))
    return transverse_derivatives(_on_space(x, space), frames, cache) / slopes


def disc_reference_controlmap(space: MultipatchSpace) -> ControlMap:
    """
    Reference controlmap onto the unit disc for a polygonal parametric domain centred at the origin: boundary
    vertices move radially onto the circle, boundary edges become circular arcs and every patch is Coons-filled.
    """
    q = space.quadrangulation
    boundary_vertices = {v for p, e in q.boundary_edges for v in q.edge_vertex_ids(p, e)}
    radii = np.linalg.norm(q.vertices[sorted(boundary_vertices)], axis=1)
    if np.any(radii < 1e-12):
        raise GeometryError("The parametric domain must be centred at the origin")
    images = q.vertices.copy()
    for v in boundary_vertices:
        images[v] = q.vertices[v] / np.linalg.norm(q.vertices[v])
    angles = np.arctan2(images[:, 1], images[:, 0])
    boundary = set(q.boundary_edges)

    local = {}
    for patch in range(q.n_patches):
        def trace(edge, u, patch=patch):
            a, b = q.edge_vertex_ids(patch, edge)
            u = np.asarray(u, dtype=float)
            if (patch, edge) in boundary:
                delta = (angles[b] - angles[a] + np.pi) % (2 * np.pi) - np.pi
                theta = angles[a] + u * delta
                return np.column_stack([np.cos(theta), np.sin(theta)])
            return (1 - u)[:, None] * images[a] + u[:, None] * images[b]

        local[patch] = coons_patch(*_edge_curves(space, patch, trace, exact=False), basis=space.bases[patch])
    r = ControlMap(
        space, _assemble_patches(space, local), {"source": "disc-reference"},
        identity_boundary=False, target=TargetDomain.unit_disc,
    )
    if r.min_det() <= 0:
        raise GeometryError("Disc reference controlmap is degenerate")
    logger.info(f"Unit disc reference controlmap over {q.n_patches} patches")
    return r
