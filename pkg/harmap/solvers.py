"""Nonlinear drivers, elliptic coefficient kernels, the regularised weak form and Winslow minimisation"""
from dataclasses import asdict, dataclass, field
import logging
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse

from . import config
from .assembly import EvalCache, FieldLayout, SparseSystem, Term, assemble, laplace_matrix
from .constants import Linearisation, Scheme
from .diffusivity import context_from_state
from .errors import BarrierError, ConvergenceError, InputError, NumericalError
from .maps import GeometryMap
from .topology import BoundaryCorrespondence, MultipatchSpace, dirichlet_lift
from .utils import adj2, det2

logger = logging.getLogger(__name__)
logger.setLevel(config.LOG_LEVEL)


@dataclass
class SolverConfig:
    scheme: Scheme = Scheme.c0dg
    linearisation: Linearisation = Linearisation.newton
    mu_fp: float = field(default_factory=lambda: config.MU_FIXED_POINT)
    mu_newton: float = field(default_factory=lambda: config.MU_NEWTON)
    eps_weak: float = field(default_factory=lambda: config.EPS_WEAK)
    eps_min: float = field(default_factory=lambda: config.EPS_MIN)
    eps_continuation: bool = True
    eta_dg: float = field(default_factory=lambda: config.ETA_DG)
    eta_rot: float = field(default_factory=lambda: config.ETA_ROT)
    alpha_rot: float = field(default_factory=lambda: config.ALPHA_ROT)
    rel_tol: float = field(default_factory=lambda: config.REL_TOL)
    abs_tol: float = field(default_factory=lambda: config.ABS_TOL)
    max_iter: int = field(default_factory=lambda: config.MAX_ITER)
    line_search_factor: float = field(default_factory=lambda: config.LINE_SEARCH_FACTOR)
    armijo: float = field(default_factory=lambda: config.ARMIJO_CONSTANT)
    min_step: float = field(default_factory=lambda: config.MIN_STEP)
    quad_order: Optional[int] = None

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        self.linearisation = Linearisation(self.linearisation)
        for name in ("mu_fp", "mu_newton", "eps_weak", "eps_min", "eta_dg", "eta_rot"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.alpha_rot < 1:
            raise InputError(f"alpha_rot must lie in (0, 1), got {self.alpha_rot}")
        if not 0 < self.line_search_factor < 1:
            raise InputError(f"line_search_factor must lie in (0, 1), got {self.line_search_factor}")
        if self.max_iter < 1:
            raise InputError("max_iter must be at least 1")

    @property
    def mu(self) -> float:
        """Shift matching the selected linearisation"""
        return self.mu_newton if self.linearisation == Linearisation.newton else self.mu_fp

    @property
    def eps_schedule(self) -> List[float]:
        if not self.eps_continuation:
            return [self.eps_weak]
        schedule = [self.eps_weak]
        while schedule[-1] / 10 >= self.eps_min * (1 - 1e-9):
            schedule.append(schedule[-1] / 10)
        return schedule

    def as_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["scheme"] = self.scheme.value
        out["linearisation"] = self.linearisation.value
        return out


@dataclass
class EllipticCoefficients:
    """``A_mu = A(J) + mu I`` with ``A = C^T C`` and the scaling ``gamma = tr(A_mu) / |A_mu|_F^2``"""
    A: np.ndarray
    A_mu: np.ndarray
    C: np.ndarray
    gamma: np.ndarray


def metric_entries(J: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``g11, g12, g22`` of the metric tensor ``J^T J``"""
    g11 = J[..., 0, 0] ** 2 + J[..., 1, 0] ** 2
    g12 = J[..., 0, 0] * J[..., 0, 1] + J[..., 1, 0] * J[..., 1, 1]
    g22 = J[..., 0, 1] ** 2 + J[..., 1, 1] ** 2
    return g11, g12, g22


def elliptic_coefficients(J: np.ndarray, mu: float = 0.0) -> EllipticCoefficients:
    J = np.asarray(J, dtype=float)
    g11, g12, g22 = metric_entries(J)
    A = np.empty(J.shape)
    A[..., 0, 0] = g22
    A[..., 0, 1] = -g12
    A[..., 1, 0] = -g12
    A[..., 1, 1] = g11
    C = np.empty(J.shape)
    C[..., 0, 0] = J[..., 1, 1]
    C[..., 0, 1] = -J[..., 1, 0]
    C[..., 1, 0] = -J[..., 0, 1]
    C[..., 1, 1] = J[..., 0, 0]
    A_mu = A + mu * np.eye(2)
    gamma = np.trace(A_mu, axis1=-2, axis2=-1) / (A_mu ** 2).sum(axis=(-2, -1))
    return EllipticCoefficients(A, A_mu, C, gamma)


def regularise_det(x: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """``R_eps(x) = (x + sqrt(4 eps^2 + x^2)) / 2`` and its derivative, positive for every ``x``"""
    root = np.sqrt(4 * eps ** 2 + x ** 2)
    return (x + root) / 2, (1 + x / root) / 2


@dataclass
class SolveResult:
    state: np.ndarray
    iterations: int
    residual_norm: float
    trace: List[Dict[str, float]] = field(default_factory=list)


def _log_iteration(name: str, record: Dict[str, float]):
    if config.VERBOSE_LOGS:
        logger.debug(f"{name} " + " ".join(f"{k}={v:.3e}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items()))


def _reduced_solve(J: sparse.spmatrix, r: np.ndarray, fixed: Optional[np.ndarray]) -> np.ndarray:
    fixed = np.zeros(len(r), dtype=bool) if fixed is None else fixed
    return SparseSystem(J.tocsr(), -r, fixed).solve()


def _free_norm(r: np.ndarray, fixed: Optional[np.ndarray]) -> float:
    return float(np.linalg.norm(r if fixed is None else r[~fixed]))


def newton_driver(
    evaluator: Callable,
    x0: np.ndarray,
    cfg: SolverConfig,
    fixed: Optional[np.ndarray] = None,
    name: str = "newton",
) -> SolveResult:
    """
    Damped Newton iteration.  Steps are shortened by ``cfg.line_search_factor`` until the Armijo condition on
    ``|r|^2 / 2`` holds; a step whose residual cannot be evaluated counts as rejected.
    """
    x = np.array(x0, dtype=float)
    trace: List[Dict[str, float]] = []
    for k in range(cfg.max_iter + 1):
        r, J = evaluator(x, True)
        rn = _free_norm(r, fixed)
        if rn < cfg.abs_tol:
            return SolveResult(x, k, rn, trace)
        if k == cfg.max_iter:
            break
        dx = _reduced_solve(J, r, fixed)
        xn = max(np.linalg.norm(x), np.finfo(float).tiny)
        if np.linalg.norm(dx) <= cfg.rel_tol * xn:
            x = x + dx
            trace.append({"iteration": k + 1, "residual": rn, "update": float(np.linalg.norm(dx) / xn), "step": 1.0})
            return SolveResult(x, k + 1, rn, trace)

        merit = 0.5 * rn ** 2
        step = 1.0
        while True:
            candidate = x + step * dx
            try:
                rt, _ = evaluator(candidate, False)
                trial = 0.5 * _free_norm(rt, fixed) ** 2
            except NumericalError:
                trial = np.inf
            if trial <= merit - 2 * cfg.armijo * step * merit:
                break
            step *= cfg.line_search_factor
            if step < cfg.min_step:
                trace.append({"iteration": k + 1, "residual": rn, "update": float("nan"), "step": step})
                raise ConvergenceError(f"{name}: line search stagnated at iteration {k + 1}", trace)
        x = candidate
        update = float(step * np.linalg.norm(dx) / xn)
        record = {"iteration": k + 1, "residual": rn, "update": update, "step": step}
        trace.append(record)
        _log_iteration(name, record)
        if update < cfg.rel_tol:
            return SolveResult(x, k + 1, rn, trace)
    raise ConvergenceError(f"{name}: no convergence within {cfg.max_iter} iterations", trace)


def fixed_point_driver(
    evaluator: Callable,
    x0: np.ndarray,
    cfg: SolverConfig,
    fixed: Optional[np.ndarray] = None,
    name: str = "fixed-point",
) -> SolveResult:
    """
    Fixed-point iteration on frozen-coefficient problems.  ``evaluator(x)`` returns the residual at ``x`` of the
    problem frozen at ``x`` together with its (constant) matrix, so every step solves one linear system.
    """
    x = np.array(x0, dtype=float)
    trace: List[Dict[str, float]] = []
    for k in range(cfg.max_iter + 1):
        r, K = evaluator(x, True)
        rn = _free_norm(r, fixed)
        if rn < cfg.abs_tol:
            return SolveResult(x, k, rn, trace)
        if k == cfg.max_iter:
            break
        dx = _reduced_solve(K, r, fixed)
        x = x + dx
        update = float(np.linalg.norm(dx) / max(np.linalg.norm(x), np.finfo(float).tiny))
        record = {"iteration": k + 1, "residual": rn, "update": update}
        trace.append(record)
        _log_iteration(name, record)
        if update < cfg.rel_tol:
            return SolveResult(x, k + 1, rn, trace)
    raise ConvergenceError(f"{name}: no convergence within {cfg.max_iter} iterations", trace)


def drive(evaluator: Callable, x0: np.ndarray, cfg: SolverConfig, fixed: Optional[np.ndarray], name: str) -> SolveResult:
    """Dispatch on the configured linearisation"""
    if cfg.linearisation == Linearisation.newton:
        return newton_driver(evaluator, x0, cfg, fixed, name)
    return fixed_point_driver(evaluator, x0, cfg, fixed, name)


def geometry_layout(space: MultipatchSpace, prefix: str = "x") -> FieldLayout:
    return FieldLayout([(f"{prefix}1", space), (f"{prefix}2", space)])


def boundary_mask(layout: FieldLayout, prefix: str = "x") -> np.ndarray:
    space = layout.space(f"{prefix}1")
    return layout.mask({f"{prefix}1": space.boundary_dofs, f"{prefix}2": space.boundary_dofs})


def field_jacobian(layout: FieldLayout, state: np.ndarray, points, prefix: str = "x") -> np.ndarray:
    """``J[:, a, b] = d f_a / d xi_b`` of a two-component field stored in ``state``"""
    return np.stack(
        [
            np.stack([layout.values(state, points, f"{prefix}{a}", f"d{b}") for b in (1, 2)], axis=-1)
            for a in (1, 2)
        ],
        axis=1,
    )


def forward_laplace(space: MultipatchSpace, F: BoundaryCorrespondence, cfg: Optional[SolverConfig] = None) -> GeometryMap:
    """Componentwise discrete harmonic extension of the boundary correspondence"""
    cfg = cfg or SolverConfig()
    cache = EvalCache.build(space, cfg.quad_order)
    lifted = dirichlet_lift(space, F)
    L = laplace_matrix(space, cache)
    mask = np.zeros(space.dimension, dtype=bool)
    mask[space.boundary_dofs] = True
    coeffs = np.column_stack(
        [SparseSystem(L, np.zeros(space.dimension), mask, lifted[:, c]).solve() for c in range(2)]
    )
    logger.info(f"Forward Laplace initial guess on {space.dimension} basis functions")
    return GeometryMap(space, coeffs, {"scheme": "forward-laplace"})


# d adj(J) / d J[a, b]
DADJ = np.zeros((2, 2, 2, 2))
DADJ[0, 0] = [[0, 0], [0, 1]]
DADJ[0, 1] = [[0, -1], [0, 0]]
DADJ[1, 0] = [[0, 0], [-1, 0]]
DADJ[1, 1] = [[1, 0], [0, 0]]


def cofactor(J: np.ndarray) -> np.ndarray:
    """Derivative of ``det J`` with respect to the entries of ``J``"""
    return np.swapaxes(adj2(J), -1, -2)


def pulled_back_terms(
    row: str,
    grads: np.ndarray,
    J: np.ndarray,
    D: np.ndarray,
    eps: Optional[float] = None,
    grad_field: Optional[str] = None,
    J_field: Optional[str] = None,
    D_field: Optional[str] = None,
    dD_dJ: Optional[np.ndarray] = None,
    dD_dval: Optional[np.ndarray] = None,
    domain: str = "cells",
) -> List[Term]:
    """
    Terms of ``sum_k int grad(s_k)^T M grad(phi)`` with ``M = adj(J) D adj(J)^T / R(det J)``, the pull-back of
    ``div(D grad s_k) = 0`` through the map with Jacobian ``J``.  ``R`` is the identity unless ``eps`` is given.

    ``grads[:, k, m]`` holds ``d s_k / d xi_m``.  Linearisation columns are produced for the unknowns named by
    ``grad_field`` (``s``), ``J_field`` (the map) and ``D_field`` (state the diffusivity depends on, with
    derivatives ``dD_dJ[:, a, b]`` w.r.t. its Jacobian entries and ``dD_dval[:, a]`` w.r.t. its values).
    """
    adj = adj2(J)
    det = det2(J)
    R, dR = regularise_det(det, eps) if eps is not None else (det, np.ones_like(det))
    P = np.einsum("nij,njk,nlk->nil", adj, D, adj)
    M = P / R[:, None, None]

    jac: Dict[Tuple[int, int], Dict[Tuple[str, str], np.ndarray]] = {(k, l): {} for k in range(2) for l in range(2)}

    def add(k, l, key, value):
        target = jac[(k, l)]
        target[key] = target[key] + value if key in target else value

    if J_field is not None:
        cof = cofactor(J)
        for a in range(2):
            for b in range(2):
                dP = np.einsum("ij,njk,nlk->nil", DADJ[a, b], D, adj) + np.einsum("nij,njk,lk->nil", adj, D, DADJ[a, b])
                dM = dP / R[:, None, None] - P * (dR * cof[:, a, b] / R ** 2)[:, None, None]
                for k in range(2):
                    for l in range(2):
                        add(k, l, (f"{J_field}{a + 1}", f"d{b + 1}"), np.einsum("nm,nm->n", grads[:, k, :], dM[:, :, l]))
    if D_field is not None:
        for key_op, dD in _diffusivity_derivatives(D_field, dD_dJ, dD_dval):
            dM = np.einsum("nij,njk,nlk->nil", adj, dD, adj) / R[:, None, None]
            for k in range(2):
                for l in range(2):
                    add(k, l, key_op, np.einsum("nm,nm->n", grads[:, k, :], dM[:, :, l]))
    if grad_field is not None:
        for k in range(2):
            for l in range(2):
                for m in range(2):
                    add(k, l, (f"{grad_field}{k + 1}", f"d{m + 1}"), M[:, m, l])

    terms = []
    for k in range(2):
        for l in range(2):
            value = np.einsum("nm,nm->n", grads[:, k, :], M[:, :, l])
            terms.append(Term(f"{row}{k + 1}", f"d{l + 1}", value, jac[(k, l)], domain))
    return terms


def _diffusivity_derivatives(D_field: str, dD_dJ, dD_dval):
    if dD_dJ is not None:
        for a in range(2):
            for b in range(2):
                yield (f"{D_field}{a + 1}", f"d{b + 1}"), dD_dJ[:, a, b]
    if dD_dval is not None:
        for a in range(2):
            yield (f"{D_field}{a + 1}", "val"), dD_dval[:, a]


def weak_form_evaluator(
    layout: FieldLayout,
    cache: EvalCache,
    eps: float,
    controlmap: Optional[GeometryMap] = None,
    diffusivity=None,
    reference: Optional[GeometryMap] = None,
):
    """Residual and Jacobian of the regularised weak form, optionally under a controlmap and a diffusivity"""
    points = cache.cells
    m = len(points)
    if controlmap is None:
        grads = np.broadcast_to(np.eye(2), (m, 2, 2))
    else:
        ops = points.ops(controlmap.space)
        grads = np.stack([ops["d1"] @ controlmap.coeffs, ops["d2"] @ controlmap.coeffs], axis=-1)

    def evaluate(state: np.ndarray, jacobian: bool = True):
        J = field_jacobian(layout, state, points)
        if np.any(~np.isfinite(J)):
            raise NumericalError("Non-finite Jacobian in weak-form residual")
        D, dD_dJ, dD_dval, D_field = identity_diffusivity(m), None, None, None
        if diffusivity is not None:
            ctx = context_from_state(layout, state, points, reference=reference)
            if diffusivity.state_dependent:
                D, dD_dJ, dD_dval = diffusivity.linearise(ctx)
                D_field = "x"
            else:
                D = diffusivity.evaluate(ctx)
        terms = pulled_back_terms("x", grads, J, D, eps, J_field="x", D_field=D_field, dD_dJ=dD_dJ, dD_dval=dD_dval)
        return assemble(terms, layout, cache, jacobian=jacobian)

    return evaluate


def identity_diffusivity(m: int) -> np.ndarray:
    return np.broadcast_to(np.eye(2), (m, 2, 2)).copy()


def solve_weak_form(
    space: MultipatchSpace,
    initial: GeometryMap,
    cfg: Optional[SolverConfig] = None,
    controlmap: Optional[GeometryMap] = None,
    diffusivity=None,
    reference: Optional[GeometryMap] = None,
) -> GeometryMap:
    """
    Newton solution of the regularised weak form starting from ``initial``.  With continuation enabled the
    regularisation is reduced by a factor 10 per stage down to ``cfg.eps_min``, each stage warm-started.
    """
    cfg = cfg or SolverConfig(scheme=Scheme.weakform)
    cache = EvalCache.build(space, cfg.quad_order)
    layout = geometry_layout(space)
    fixed = boundary_mask(layout)
    newton = SolverConfig(**{**cfg.as_dict(), "linearisation": Linearisation.newton})
    state = initial.state
    iterations = 0
    trace = []
    for eps in cfg.eps_schedule:
        evaluator = weak_form_evaluator(layout, cache, eps, controlmap, diffusivity, reference)
        result = newton_driver(evaluator, state, newton, fixed, name=f"weak-form eps={eps:.0e}")
        state = result.state
        iterations += result.iterations
        trace.extend(result.trace)
        logger.info(f"Weak form with eps={eps:.1e} converged in {result.iterations} iterations")
    return GeometryMap.from_state(
        space, state, scheme=Scheme.weakform.value, iterations=iterations, residual=result.residual_norm,
        eps=cfg.eps_schedule[-1], controlmap=controlmap is not None,
        diffusivity=type(diffusivity).__name__ if diffusivity is not None else None,
    )


def winslow_terms(J: np.ndarray) -> Tuple[np.ndarray, List[Term]]:
    """Integrand ``|J|_F^2 / det J`` with its gradient (residual) and Hessian (Jacobian) as terms"""
    det = det2(J)
    if np.any(det <= 0):
        raise BarrierError("Winslow functional evaluated at a degenerate map")
    norm2 = (J ** 2).sum(axis=(1, 2))
    cof = cofactor(J)
    grad = 2 * J / det[:, None, None] - norm2[:, None, None] * cof / det[:, None, None] ** 2
    # d cof[a, b] / d J[c, d]
    dcof = np.zeros((2, 2, 2, 2))
    dcof[0, 0, 1, 1] = 1
    dcof[0, 1, 1, 0] = -1
    dcof[1, 0, 0, 1] = -1
    dcof[1, 1, 0, 0] = 1
    terms = []
    for a in range(2):
        for b in range(2):
            jac = {}
            for c in range(2):
                for d in range(2):
                    h = (
                        2 * (a == c) * (b == d) / det
                        - 2 * J[:, a, b] * cof[:, c, d] / det ** 2
                        - 2 * J[:, c, d] * cof[:, a, b] / det ** 2
                        - norm2 * dcof[a, b, c, d] / det ** 2
                        + 2 * norm2 * cof[:, a, b] * cof[:, c, d] / det ** 3
                    )
                    jac[(f"x{c + 1}", f"d{d + 1}")] = h
            terms.append(Term(f"x{a + 1}", f"d{b + 1}", grad[:, a, b], jac))
    return norm2 / det, terms


def winslow_value(m: GeometryMap, cache: Optional[EvalCache] = None) -> float:
    cache = cache or EvalCache.build(m.space)
    layout = geometry_layout(m.space)
    J = field_jacobian(layout, m.state, cache.cells)
    values, _ = winslow_terms(J)
    return float(cache.cells.weights @ values)


def minimise_winslow(space: MultipatchSpace, initial: GeometryMap, cfg: Optional[SolverConfig] = None) -> GeometryMap:
    """Newton minimisation of the Winslow functional over the interior coefficients"""
    cfg = cfg or SolverConfig(scheme=Scheme.winslow)
    cache = EvalCache.build(space, cfg.quad_order)
    layout = geometry_layout(space)
    fixed = boundary_mask(layout)
    points = cache.cells

    def objective(state: np.ndarray, derivatives: bool = True):
        J = field_jacobian(layout, state, points)
        values, terms = winslow_terms(J)
        value = float(points.weights @ values)
        if not derivatives:
            return value, None, None
        g, H = assemble(terms, layout, cache)
        return value, g, H

    try:
        value, g, H = objective(initial.state)
    except BarrierError as e:
        raise BarrierError("Winslow minimisation needs a nondegenerate initial map") from e

    state = initial.state
    free = ~fixed
    trace = [{"iteration": 0, "objective": value, "gradient": float(np.linalg.norm(g[free])), "step": 0.0}]
    for k in range(1, cfg.max_iter + 1):
        gn = float(np.linalg.norm(g[free]))
        if gn < cfg.abs_tol:
            break
        shift = 0.0
        while True:
            Hs = H + shift * sparse.identity(layout.size)
            dx = _reduced_solve(Hs, g, fixed)
            slope = float(g[free] @ dx[free])
            if slope < 0:
                break
            shift = max(10 * shift, 1e-8 * abs(H.diagonal()).max())
        step = 1.0
        while True:
            candidate = state + step * dx
            try:
                trial, _, _ = objective(candidate, derivatives=False)
            except BarrierError:
                trial = np.inf
            if trial <= value + cfg.armijo * step * slope:
                break
            step *= cfg.line_search_factor
            if step < cfg.min_step:
                raise ConvergenceError(f"Winslow minimisation: line search stagnated at iteration {k}", trace)
        update = float(step * np.linalg.norm(dx) / np.linalg.norm(state))
        state = candidate
        value, g, H = objective(state)
        record = {"iteration": k, "objective": value, "gradient": float(np.linalg.norm(g[free])), "step": step}
        trace.append(record)
        _log_iteration("winslow", record)
        if update < cfg.rel_tol:
            break
    else:
        raise ConvergenceError(f"Winslow minimisation: no convergence within {cfg.max_iter} iterations", trace)
    logger.info(f"Winslow minimisation finished after {len(trace) - 1} iterations, objective {value:.12g}")
    return GeometryMap.from_state(
        space, state, scheme=Scheme.winslow.value, iterations=len(trace) - 1, objective=value,
        objective_trace=[t["objective"] for t in trace],
    )
