"""Nondivergence-form discretisations: C0 interior penalty, weak Hessian recovery and the rotation-free mixed scheme"""
from dataclasses import dataclass, field, replace
import logging
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import sparse

from . import config
from .assembly import EvalCache, FieldLayout, SparseSystem, Term, assemble, laplace_matrix, l2_project, mass_matrix
from .constants import Linearisation, Scheme
from .errors import CompatibilityError, InputError, LinearSolverError
from .maps import GeometryMap
from .solvers import (
    SolverConfig,
    boundary_mask,
    drive,
    elliptic_coefficients,
    field_jacobian,
    fixed_point_driver,
    forward_laplace,
    geometry_layout,
)
from .splines import TensorBasis, make_open_knot_vector
from .topology import BoundaryCorrespondence, MultipatchSpace, dirichlet_lift

logger = logging.getLogger(__name__)
logger.setLevel(config.LOG_LEVEL)


@dataclass
class MixedSolution:
    """Geometry recovered from a mixed scheme together with its auxiliary fields (coefficients per field name)"""
    geometry: GeometryMap
    fields: Dict[str, np.ndarray] = field(default_factory=dict)
    diagnostics: Dict[str, float] = field(default_factory=dict)


def metric_derivative(J: np.ndarray) -> np.ndarray:
    """``dA[:, a, b] = d A / d J[a, b]`` for ``A = adj(J) adj(J)^T``"""
    m = len(J)
    dA = np.zeros((m, 2, 2, 2, 2))
    for a in range(2):
        # g11 and g12 depend on column 0, g22 and g12 on column 1
        dg11 = (2 * J[:, a, 0], np.zeros(m))
        dg22 = (np.zeros(m), 2 * J[:, a, 1])
        dg12 = (J[:, a, 1], J[:, a, 0])
        for b in range(2):
            dA[:, a, b, 0, 0] = dg22[b]
            dA[:, a, b, 0, 1] = -dg12[b]
            dA[:, a, b, 1, 0] = -dg12[b]
            dA[:, a, b, 1, 1] = dg11[b]
    return dA


def ndf_term(
    row: str,
    test: str,
    J: np.ndarray,
    hessian: np.ndarray,
    keys: Dict[Tuple[int, int], Tuple[str, str]],
    mu: float,
    newton: bool,
    J_field: Optional[str] = None,
) -> Term:
    """
    ``gamma(A_mu) A_mu : H`` tested with ``test``.  ``keys`` maps each Hessian entry to the unknown operator it is
    read from.  The fixed-point residual subtracts ``mu gamma tr(H)`` so its root is that of ``A : H``; the frozen
    matrix is ``gamma A_mu``.  Newton differentiates through ``J`` as well.
    """
    coeffs = elliptic_coefficients(J, mu)
    A_mu, gamma = coeffs.A_mu, coeffs.gamma
    contraction = np.einsum("nij,nij->n", A_mu, hessian)
    if newton:
        value = gamma * contraction
    else:
        value = gamma * (contraction - mu * np.trace(hessian, axis1=1, axis2=2))

    jac: Dict[Tuple[str, str], np.ndarray] = {}

    def add(key, v):
        jac[key] = jac[key] + v if key in jac else v

    for (k, l), key in keys.items():
        add(key, gamma * A_mu[:, k, l])
    if newton and J_field is not None:
        dA = metric_derivative(J)
        norm2 = (A_mu ** 2).sum(axis=(1, 2))
        trace = np.trace(A_mu, axis1=1, axis2=2)
        for a in range(2):
            for b in range(2):
                d = dA[:, a, b]
                dtrace = np.trace(d, axis1=1, axis2=2)
                dgamma = dtrace / norm2 - 2 * trace * np.einsum("nij,nij->n", A_mu, d) / norm2 ** 2
                add(
                    (f"{J_field}{a + 1}", f"d{b + 1}"),
                    dgamma * contraction + gamma * np.einsum("nij,nij->n", d, hessian),
                )
    return Term(row, test, value, jac)


def _hessian_of(layout: FieldLayout, state: np.ndarray, points, name: str) -> np.ndarray:
    h11, h12, h22 = (layout.values(state, points, name, op) for op in ("d11", "d12", "d22"))
    return np.stack([np.stack([h11, h12], axis=-1), np.stack([h12, h22], axis=-1)], axis=-1)


def _check_no_controlmap(controlmap):
    if controlmap is not None:
        raise InputError("Nondivergence-form schemes do not take a controlmap, use the weak form instead")


def _initial(space: MultipatchSpace, F: BoundaryCorrespondence, cfg: SolverConfig, initial: Optional[GeometryMap]):
    return initial if initial is not None else forward_laplace(space, F, cfg)


def facet_jump_penalty(m: GeometryMap, eta: float = None, cache: Optional[EvalCache] = None) -> float:
    """``sum_F eta / h int_F |[[d_n x]]|^2`` over the interior patch facets"""
    eta = config.ETA_DG if eta is None else eta
    cache = cache or EvalCache.build(m.space)
    points = cache.facets
    if not len(points):
        return 0.0
    jumps = points.ops(m.space)["jn"] @ m.coeffs
    return float(points.weights @ (eta / points.h * (jumps ** 2).sum(axis=1)))


def c0dg_evaluator(layout: FieldLayout, cache: EvalCache, cfg: SolverConfig):
    newton = cfg.linearisation == Linearisation.newton
    mu = cfg.mu

    def evaluate(state: np.ndarray, jacobian: bool = True):
        points = cache.cells
        J = field_jacobian(layout, state, points)
        terms = []
        for i in (1, 2):
            name = f"x{i}"
            keys = {(0, 0): (name, "d11"), (0, 1): (name, "d12"), (1, 0): (name, "d12"), (1, 1): (name, "d22")}
            terms.append(
                ndf_term(name, "lap", J, _hessian_of(layout, state, points, name), keys, mu, newton, J_field="x")
            )
            if len(cache.facets):
                scale = cfg.eta_dg / cache.facets.h
                jump = layout.values(state, cache.facets, name, "jn")
                terms.append(Term(name, "jn", scale * jump, {(name, "jn"): scale}, domain="facets"))
        return assemble(terms, layout, cache, jacobian=jacobian)

    return evaluate


def solve_c0dg(
    space: MultipatchSpace,
    F: BoundaryCorrespondence,
    cfg: Optional[SolverConfig] = None,
    controlmap: Optional[GeometryMap] = None,
    initial: Optional[GeometryMap] = None,
) -> GeometryMap:
    """
    Petrov-Galerkin discretisation tested with the Laplacian, gradient jumps penalised across interior patch
    facets with ``eta / h``.  Starts from the forward-Laplace map unless ``initial`` is given.
    """
    _check_no_controlmap(controlmap)
    cfg = cfg or SolverConfig(scheme=Scheme.c0dg)
    if space.degree < 2:
        raise InputError("The C0 interior penalty scheme needs degree >= 2")
    cache = EvalCache.build(space, cfg.quad_order)
    x0 = _initial(space, F, cfg, initial)
    layout = geometry_layout(space)
    result = drive(c0dg_evaluator(layout, cache, cfg), x0.state, cfg, boundary_mask(layout), name="c0dg")
    logger.info(f"C0-DG ({cfg.linearisation.value}) converged in {result.iterations} iterations")
    return GeometryMap.from_state(
        space, result.state, scheme=Scheme.c0dg.value, linearisation=cfg.linearisation.value,
        iterations=result.iterations, residual=result.residual_norm,
    )


HESSIAN_FIELDS = [f"h{i}{k}{l}" for i in (1, 2) for k in (1, 2) for l in (1, 2)]


def hessian_layout(space: MultipatchSpace) -> FieldLayout:
    return FieldLayout([("x1", space), ("x2", space)] + [(name, space) for name in HESSIAN_FIELDS])


def recover_hessian(space: MultipatchSpace, u: np.ndarray, cache: Optional[EvalCache] = None) -> np.ndarray:
    """
    Weak Hessian of the scalar spline with coefficients ``u``: ``int H_kl psi = -int d_k u d_l psi +
    int_boundary d_k u n_l psi``.  Returns coefficients of shape ``(N, 2, 2)``.
    """
    cache = cache or EvalCache.build(space)
    cells, boundary = cache.cells, cache.boundary
    ops, bops = cells.ops(space), boundary.ops(space)
    M = mass_matrix(space, cache)
    out = np.empty((space.dimension, 2, 2))
    for k in range(2):
        grad = ops[f"d{k + 1}"] @ u
        bgrad = bops[f"d{k + 1}"] @ u
        for l in range(2):
            rhs = -ops[f"d{l + 1}"].T @ (cells.weights * grad)
            rhs += bops["val"].T @ (boundary.weights * bgrad * boundary.normals[:, l])
            out[:, k, l] = SparseSystem(M, rhs, np.zeros(space.dimension, dtype=bool)).solve()
    return out


def hessian_recovery_evaluator(layout: FieldLayout, cache: EvalCache, cfg: SolverConfig):
    newton = cfg.linearisation == Linearisation.newton
    mu = cfg.mu
    cells, boundary = cache.cells, cache.boundary

    def evaluate(state: np.ndarray, jacobian: bool = True):
        J = field_jacobian(layout, state, cells)
        terms = []
        for i in (1, 2):
            names = {(k, l): f"h{i}{k + 1}{l + 1}" for k in range(2) for l in range(2)}
            hessian = np.stack(
                [np.stack([layout.values(state, cells, names[(k, l)]) for l in range(2)], axis=-1) for k in range(2)],
                axis=1,
            )
            keys = {kl: (name, "val") for kl, name in names.items()}
            terms.append(ndf_term(f"x{i}", "val", J, hessian, keys, mu, newton, J_field="x"))
            for (k, l), name in names.items():
                grad = f"d{k + 1}"
                terms.append(Term(name, "val", layout.values(state, cells, name), {(name, "val"): 1.0}))
                terms.append(Term(name, f"d{l + 1}", layout.values(state, cells, f"x{i}", grad), {(f"x{i}", grad): 1.0}))
                if len(boundary):
                    n_l = boundary.normals[:, l]
                    terms.append(Term(
                        name, "val", -layout.values(state, boundary, f"x{i}", grad) * n_l,
                        {(f"x{i}", grad): -n_l}, domain="boundary",
                    ))
        return assemble(terms, layout, cache, jacobian=jacobian)

    return evaluate


def solve_hessian_recovery(
    space: MultipatchSpace,
    F: BoundaryCorrespondence,
    cfg: Optional[SolverConfig] = None,
    initial: Optional[GeometryMap] = None,
) -> MixedSolution:
    """Mixed scheme with an auxiliary weak Hessian per component, tested with the identity"""
    cfg = cfg or SolverConfig(scheme=Scheme.hessian)
    cache = EvalCache.build(space, cfg.quad_order)
    x0 = _initial(space, F, cfg, initial)
    layout = hessian_layout(space)

    state = np.zeros(layout.size)
    for i in (1, 2):
        state[layout.slice(f"x{i}")] = x0.coeffs[:, i - 1]
        H = recover_hessian(space, x0.coeffs[:, i - 1], cache)
        for k in range(2):
            for l in range(2):
                state[layout.slice(f"h{i}{k + 1}{l + 1}")] = H[:, k, l]
    fixed = layout.mask({"x1": space.boundary_dofs, "x2": space.boundary_dofs})

    result = drive(hessian_recovery_evaluator(layout, cache, cfg), state, cfg, fixed, name="hessian-recovery")
    logger.info(f"Hessian recovery ({cfg.linearisation.value}) converged in {result.iterations} iterations")
    coeffs = np.column_stack([result.state[layout.slice(f"x{i}")] for i in (1, 2)])
    geometry = GeometryMap(space, coeffs, {
        "scheme": Scheme.hessian.value, "linearisation": cfg.linearisation.value,
        "iterations": result.iterations, "residual": result.residual_norm,
    })
    return MixedSolution(geometry, {name: result.state[layout.slice(name)] for name in HESSIAN_FIELDS})


def coarsen_every_other(space: MultipatchSpace) -> MultipatchSpace:
    """Multiplier space of the subgrid pair: every other interior knot removed from each patch knot vector"""
    bases = []
    for b in space.bases:
        kvs = [make_open_knot_vector(kv.degree, kv.interior_breaks[1::2]) for kv in (b.kv_u, b.kv_v)]
        bases.append(TensorBasis(*kvs))
    try:
        return MultipatchSpace.build(space.quadrangulation, bases)
    except CompatibilityError as e:
        raise CompatibilityError(f"Cannot coarsen the space for the multiplier: {e.message}") from e


def stabilisation_weight(A_mu: np.ndarray, alpha: float) -> float:
    """``sqrt(1 - lambda / 2)`` with ``lambda = (2 + sqrt(alpha eps)) / 2`` and ``eps = min tr(B)^2 / |B|_F^2 - 1``"""
    ratio = np.trace(A_mu, axis1=-2, axis2=-1) ** 2 / (A_mu ** 2).sum(axis=(-2, -1))
    eps = max(float(np.min(ratio)) - 1.0, 0.0)
    lam = (2 + np.sqrt(alpha * eps)) / 2
    return float(np.sqrt(1 - lam / 2))


JACOBIAN_FIELDS = [f"j{i}{b}" for i in (1, 2) for b in (1, 2)]


def rotation_free_layout(space: MultipatchSpace, pressure: MultipatchSpace) -> FieldLayout:
    return FieldLayout(
        [(name, space) for name in JACOBIAN_FIELDS] + [("p1", pressure), ("p2", pressure)], scalars=["m1", "m2"]
    )


def _jacobian_field(layout: FieldLayout, state: np.ndarray, points) -> np.ndarray:
    """``J[:, i, b]`` read from the ``j{i}{b}`` fields"""
    return np.stack(
        [np.stack([layout.values(state, points, f"j{i}{b}") for b in (1, 2)], axis=-1) for i in (1, 2)], axis=1
    )


def _curl(layout: FieldLayout, state: np.ndarray, points, i: int) -> np.ndarray:
    return layout.values(state, points, f"j{i}1", "d2") - layout.values(state, points, f"j{i}2", "d1")


def rotation_free_evaluator(layout: FieldLayout, cache: EvalCache, cfg: SolverConfig, tangential: np.ndarray):
    """
    Frozen-coefficient residual of the rotation-free scheme.  ``tangential[:, i]`` is the tangential derivative
    of the boundary data at the boundary quadrature points.
    """
    cells, boundary = cache.cells, cache.boundary
    mu = cfg.mu_fp
    pressure = layout.space("p1")
    means = cells.ops(pressure)["val"].T @ cells.weights

    def evaluate(state: np.ndarray, jacobian: bool = True):
        J = _jacobian_field(layout, state, cells)
        coeffs = elliptic_coefficients(J, mu)
        sigma = stabilisation_weight(coeffs.A_mu, cfg.alpha_rot)
        terms = []
        for i in (1, 2):
            gradient = {}
            for b in (1, 2):
                gradient[b] = np.stack([layout.values(state, cells, f"j{i}{b}", f"d{c}") for c in (1, 2)], axis=-1)
            dJ = np.stack([gradient[1], gradient[2]], axis=1)
            keys = {(b, c): (f"j{i}{b + 1}", f"d{c + 1}") for b in range(2) for c in range(2)}
            # div of the test field: row j{i}{b} tested with d{b}
            base = ndf_term(f"j{i}1", "d1", J, dJ, keys, mu, newton=False)
            terms.extend([base, replace(base, row=f"j{i}2", test="d2")])

            curl = _curl(layout, state, cells, i)
            p = layout.values(state, cells, f"p{i}")
            terms.append(Term(f"j{i}1", "d2", p + sigma * curl, {
                (f"p{i}", "val"): 1.0, (f"j{i}1", "d2"): sigma, (f"j{i}2", "d1"): -sigma,
            }))
            terms.append(Term(f"j{i}2", "d1", -p - sigma * curl, {
                (f"p{i}", "val"): -1.0, (f"j{i}1", "d2"): -sigma, (f"j{i}2", "d1"): sigma,
            }))
            terms.append(Term(f"p{i}", "val", curl, {(f"j{i}1", "d2"): 1.0, (f"j{i}2", "d1"): -1.0}))

            if len(boundary):
                t = boundary.tangents
                scale = cfg.eta_rot / boundary.h
                along = sum(layout.values(state, boundary, f"j{i}{c}") * t[:, c - 1] for c in (1, 2))
                defect = along - tangential[:, i - 1]
                for b in (1, 2):
                    terms.append(Term(
                        f"j{i}{b}", "val", scale * defect * t[:, b - 1],
                        {(f"j{i}{c}", "val"): scale * t[:, c - 1] * t[:, b - 1] for c in (1, 2)},
                        domain="boundary",
                    ))
        r, K = assemble(terms, layout, cache, jacobian=jacobian)
        # zero-average multiplier space through one scalar per component
        rows, cols, vals = [], [], []
        for i in (1, 2):
            ps, ms = layout.slice(f"p{i}"), layout.slice(f"m{i}").start
            r[ps] += state[ms] * means
            r[ms] += means @ state[ps]
            idx = np.arange(ps.start, ps.stop)
            rows.extend([idx, np.full(len(idx), ms)])
            cols.extend([np.full(len(idx), ms), idx])
            vals.extend([means, means])
        if not jacobian:
            return r, None
        C = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=K.shape)
        return r, (K + C).tocsr()

    return evaluate


def recover_geometry(space: MultipatchSpace, F: BoundaryCorrespondence, jacobian: np.ndarray, cache: EvalCache) -> np.ndarray:
    """Coefficients of ``x`` with trace ``F`` and ``int (dx - J) : d phi = 0``; ``jacobian`` has shape ``(N, 2, 2)``"""
    ops = cache.cells.ops(space)
    W = cache.cells.weights
    L = laplace_matrix(space, cache)
    lifted = dirichlet_lift(space, F)
    mask = np.zeros(space.dimension, dtype=bool)
    mask[space.boundary_dofs] = True
    out = np.empty((space.dimension, 2))
    for i in range(2):
        rhs = sum(ops[f"d{b + 1}"].T @ (W * (ops["val"] @ jacobian[:, i, b])) for b in range(2))
        out[:, i] = SparseSystem(L, rhs, mask, lifted[:, i]).solve()
    return out


def solve_rotation_free(
    space: MultipatchSpace,
    F: BoundaryCorrespondence,
    cfg: Optional[SolverConfig] = None,
    initial: Optional[GeometryMap] = None,
) -> MixedSolution:
    """
    Fixed-point solution for a curl-free Jacobian field with weak tangential boundary data and curl stabilisation,
    followed by the H1 recovery of the map itself.
    """
    cfg = cfg or SolverConfig(scheme=Scheme.rotfree, linearisation=Linearisation.fixed_point)
    if cfg.linearisation != Linearisation.fixed_point:
        raise InputError("The rotation-free scheme only supports the fixed-point linearisation")
    cache = EvalCache.build(space, cfg.quad_order)
    x0 = _initial(space, F, cfg, initial)
    pressure = coarsen_every_other(space)
    layout = rotation_free_layout(space, pressure)

    cells = cache.cells
    values = np.stack(
        [np.stack([cells.ops(space)[f"d{b}"] @ x0.coeffs[:, i] for b in (1, 2)], axis=-1) for i in range(2)], axis=1
    )
    projected = l2_project(space, values, cache)
    state = np.zeros(layout.size)
    for i in (1, 2):
        for b in (1, 2):
            state[layout.slice(f"j{i}{b}")] = projected[:, i - 1, b - 1]

    lifted = dirichlet_lift(space, F)
    bops = cache.boundary.ops(space)
    t = cache.boundary.tangents
    tangential = np.column_stack(
        [(bops["d1"] @ lifted[:, i]) * t[:, 0] + (bops["d2"] @ lifted[:, i]) * t[:, 1] for i in range(2)]
    ) if len(cache.boundary) else np.zeros((0, 2))

    try:
        result = fixed_point_driver(rotation_free_evaluator(layout, cache, cfg, tangential), state, cfg, None, "rotation-free")
    except LinearSolverError as e:
        raise LinearSolverError(
            f"Rotation-free saddle point system is singular ({e.message}); refine the space", pivot=e.pivot
        ) from e
    jacobian = np.stack(
        [np.stack([result.state[layout.slice(f"j{i}{b}")] for b in (1, 2)], axis=-1) for i in (1, 2)], axis=1
    )
    coeffs = recover_geometry(space, F, jacobian, cache)
    curl = [
        float(np.sqrt(cells.weights @ _curl(layout, result.state, cells, i) ** 2)) for i in (1, 2)
    ]
    logger.info(f"Rotation-free scheme converged in {result.iterations} iterations, curl norms {curl}")
    geometry = GeometryMap(space, coeffs, {
        "scheme": Scheme.rotfree.value, "linearisation": Linearisation.fixed_point.value,
        "iterations": result.iterations, "residual": result.residual_norm, "curl_norm": curl,
    })
    fields = {name: result.state[layout.slice(name)] for name in JACOBIAN_FIELDS + ["p1", "p2"]}
    fields["multipliers"] = result.state[[layout.slice("m1").start, layout.slice("m2").start]]
    return MixedSolution(geometry, fields, {"curl_norm_1": curl[0], "curl_norm_2": curl[1]})
