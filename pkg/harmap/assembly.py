"""Quadrature, cached basis evaluation and residual/Jacobian assembly of pointwise variational forms"""
from dataclasses import dataclass, field
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from . import config
from .constants import EDGE_CCW, EDGE_FIXED_AXIS, EDGE_OUTWARD
from .errors import LinearSolverError, NumericalError
from .maps import operators
from .splines import KnotVector, TensorBasis
from .topology import MultipatchSpace, bilinear_map, edge_point
from .utils import det2, gauss_legendre, map_in_threads

logger = logging.getLogger(__name__)
logger.setLevel(config.LOG_LEVEL)


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor Gauss-Legendre rule with ``order`` points per direction on every knot span"""
    order: int

    def cell_points(self, basis: TensorBasis) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        g, gw = gauss_legendre(self.order)
        mus, weights, elements = [], [], []
        for e, ((a0, a1), (b0, b1)) in enumerate(basis.elements):
            uu, vv = np.meshgrid(a0 + (a1 - a0) * g, b0 + (b1 - b0) * g)
            mus.append(np.column_stack([uu.ravel(), vv.ravel()]))
            weights.append(np.outer(gw, gw).ravel() * (a1 - a0) * (b1 - b0))
            elements.append(np.full(self.order ** 2, e))
        return np.vstack(mus), np.concatenate(weights), np.concatenate(elements)

    def line_points(self, kv: KnotVector) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        g, gw = gauss_legendre(self.order)
        spans = kv.spans
        t = np.concatenate([a + (b - a) * g for a, b in spans])
        w = np.concatenate([(b - a) * gw for a, b in spans])
        return t, w, np.repeat(np.arange(len(spans)), self.order)


def _oriented(values: np.ndarray, axis: np.ndarray, m1: sparse.csr_matrix, m2: sparse.csr_matrix):
    """Per point, ``values * m1`` where ``axis == 0`` and ``values * m2`` where ``axis == 1``"""
    return sparse.diags(values * (axis == 0)) @ m1 + sparse.diags(values * (axis == 1)) @ m2


@dataclass(eq=False)
class PointSet:
    """Quadrature points of one integration domain (``cells``, ``facets`` or ``boundary``)"""
    kind: str
    weights: np.ndarray
    xi: np.ndarray
    patch: np.ndarray
    mu: np.ndarray
    element: np.ndarray
    mjac: np.ndarray
    edge: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    tangents: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    side: Optional[np.ndarray] = None
    t: Optional[np.ndarray] = None
    other_patch: Optional[np.ndarray] = None
    other_mu: Optional[np.ndarray] = None
    other_edge: Optional[np.ndarray] = None
    _ops: Dict[int, Tuple[MultipatchSpace, Dict[str, sparse.csr_matrix]]] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.weights)

    def ops(self, space: MultipatchSpace) -> Dict[str, sparse.csr_matrix]:
        """Basis operators of ``space`` at these points, memoised per space"""
        key = id(space)
        if key not in self._ops:
            self._ops[key] = (space, self._build_ops(space))
        return self._ops[key][1]

    def _build_ops(self, space: MultipatchSpace) -> Dict[str, sparse.csr_matrix]:
        ops = operators(space, self.patch, self.mu)
        if self.kind == "cells":
            ops["lap"] = ops["d11"] + ops["d22"]
            return ops
        axis = np.array([EDGE_FIXED_AXIS[e] for e in self.edge])
        outward = np.array([EDGE_OUTWARD[e] for e in self.edge], dtype=float)
        ccw = np.array([EDGE_CCW[e] for e in self.edge], dtype=float)
        n1, n2 = self.normals[:, 0], self.normals[:, 1]
        ops["dn"] = sparse.diags(n1) @ ops["d1"] + sparse.diags(n2) @ ops["d2"]
        ops["mn"] = _oriented(outward, axis, ops["m1"], ops["m2"])
        ops["mt"] = _oriented(ccw, 1 - axis, ops["m1"], ops["m2"])
        if self.kind == "facets":
            other = operators(space, self.other_patch, self.other_mu)
            o_axis = np.array([EDGE_FIXED_AXIS[e] for e in self.other_edge])
            o_outward = np.array([EDGE_OUTWARD[e] for e in self.other_edge], dtype=float)
            for k in ("val", "d1", "d2", "m1", "m2"):
                ops[f"{k}_o"] = other[k]
            ops["dn_o"] = sparse.diags(n1) @ other["d1"] + sparse.diags(n2) @ other["d2"]
            ops["mn_o"] = _oriented(o_outward, o_axis, other["m1"], other["m2"])
            ops["jn"] = ops["dn"] - ops["dn_o"]
            ops["jump"] = ops["val"] - ops["val_o"]
        return ops


def _cell_points(space: MultipatchSpace, rule: QuadratureRule, patch: int):
    mu, w, el = rule.cell_points(space.bases[patch])
    xi, J = bilinear_map(space.quadrangulation, patch, mu)
    return mu, w * np.abs(det2(J)), el, xi, J


def _edge_points(space: MultipatchSpace, rule: QuadratureRule, patch: int, edge):
    t, w, el = rule.line_points(space.edge_knot_vector(patch, edge))
    mu = edge_point(edge, t)
    xi, J = bilinear_map(space.quadrangulation, patch, mu)
    tau = J[:, :, 1 - EDGE_FIXED_AXIS[edge]]
    length = np.linalg.norm(tau, axis=1)
    normal = EDGE_CCW[edge] * np.column_stack([tau[:, 1], -tau[:, 0]]) / length[:, None]
    tangent = EDGE_CCW[edge] * tau / length[:, None]
    weights = w * length
    element_length = np.bincount(el, weights=weights)
    return t, mu, weights, el, xi, J, normal, tangent, element_length


def _normal_extent(space: MultipatchSpace, patch: int, edge, mu: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Height normal to ``edge`` of the elements touching it, at the edge points ``mu``"""
    axis = EDGE_FIXED_AXIS[edge]
    basis = space.bases[patch]
    kv = basis.kv_u if axis == 0 else basis.kv_v
    a, b = kv.spans[-1] if EDGE_OUTWARD[edge] > 0 else kv.spans[0]
    _, J = bilinear_map(space.quadrangulation, patch, mu)
    return (b - a) * np.abs(np.einsum("ij,ij->i", J[:, :, axis], normal))


@dataclass(eq=False)
class EvalCache:
    """Quadrature points and basis operators of a space on cells, interior facets and boundary edges"""
    space: MultipatchSpace
    rule: QuadratureRule
    cells: PointSet
    facets: PointSet
    boundary: PointSet

    @classmethod
    def build(cls, space: MultipatchSpace, order: Optional[int] = None, threads: Optional[int] = None) -> "EvalCache":
        order = order or space.degree + 1
        if config.ENABLE_EVAL_CACHE and order in space.cache:
            return space.cache[order]
        rule = QuadratureRule(order)
        threads = threads or config.THREADS
        q = space.quadrangulation

        parts = map_in_threads(lambda i: _cell_points(space, rule, i), range(space.n_patches), threads)
        offsets = np.cumsum([0] + [len(b.elements) for b in space.bases])
        cells = PointSet(
            "cells",
            weights=np.concatenate([p[1] for p in parts]),
            xi=np.vstack([p[3] for p in parts]),
            patch=np.concatenate([np.full(len(p[0]), i) for i, p in enumerate(parts)]),
            mu=np.vstack([p[0] for p in parts]),
            element=np.concatenate([p[2] + offsets[i] for i, p in enumerate(parts)]),
            mjac=np.concatenate([p[4] for p in parts]),
        )

        fields: Dict[str, list] = {k: [] for k in (
            "t", "mu", "w", "el", "xi", "J", "n", "tau", "h", "patch", "edge", "o_patch", "o_mu", "o_edge"
        )}
        offset = 0
        for f in q.interior_facets:
            t, mu, w, el, xi, J, n, tau, length = _edge_points(space, rule, f.patch_i, f.edge_i)
            t_o = 1.0 - t if f.flip else t
            mu_o = edge_point(f.edge_j, t_o)
            # penalty length shared by both sides: mean element height normal to the facet
            h = 0.5 * (
                _normal_extent(space, f.patch_i, f.edge_i, mu, n) + _normal_extent(space, f.patch_j, f.edge_j, mu_o, n)
            )
            for k, v in zip(
                ("t", "mu", "w", "el", "xi", "J", "n", "tau", "h"),
                (t, mu, w, el + offset, xi, J, n, tau, h),
            ):
                fields[k].append(v)
            fields["patch"].append(np.full(len(t), f.patch_i))
            fields["edge"].append(np.full(len(t), f.edge_i))
            fields["o_patch"].append(np.full(len(t), f.patch_j))
            fields["o_mu"].append(mu_o)
            fields["o_edge"].append(np.full(len(t), f.edge_j))
            offset += len(length)
        facets = _line_set("facets", fields, space.dimension)

        bfields: Dict[str, list] = {k: [] for k in (
            "t", "mu", "w", "el", "xi", "J", "n", "tau", "h", "patch", "edge", "side"
        )}
        offset = 0
        for k_side, side in enumerate(q.boundary_sides):
            lengths = []
            start = len(bfields["t"])
            for patch, edge in side:
                t, mu, w, el, xi, J, n, tau, length = _edge_points(space, rule, patch, edge)
                for k, v in zip(("t", "mu", "w", "el", "xi", "J", "n", "tau"), (t, mu, w, el + offset, xi, J, n, tau)):
                    bfields[k].append(v)
                bfields["patch"].append(np.full(len(t), patch))
                bfields["edge"].append(np.full(len(t), edge))
                bfields["side"].append(np.full(len(t), k_side))
                lengths.extend(length)
                offset += len(length)
            # weak boundary penalties use the mean element length of the side
            for chunk in bfields["t"][start:]:
                bfields["h"].append(np.full(len(chunk), np.mean(lengths)))
        boundary = _line_set("boundary", bfields, space.dimension)

        cache = cls(space, rule, cells, facets, boundary)
        logger.debug(
            f"Evaluation cache of order {order}: {len(cells)} cell, {len(facets)} facet, {len(boundary)} boundary points"
        )
        if config.ENABLE_EVAL_CACHE:
            space.cache[order] = cache
        return cache

    def domain(self, name: str) -> PointSet:
        return getattr(self, name)


def _line_set(kind: str, fields: Dict[str, list], dimension: int) -> PointSet:
    if not fields["t"]:
        empty = np.zeros(0)
        return PointSet(
            kind, empty, np.zeros((0, 2)), np.zeros(0, dtype=int), np.zeros((0, 2)), np.zeros(0, dtype=int),
            np.zeros((0, 2, 2)), edge=np.zeros(0, dtype=int), normals=np.zeros((0, 2)), tangents=np.zeros((0, 2)),
            h=empty, side=np.zeros(0, dtype=int), t=empty, other_patch=np.zeros(0, dtype=int),
            other_mu=np.zeros((0, 2)), other_edge=np.zeros(0, dtype=int),
        )
    cat = lambda k: np.concatenate(fields[k]) if k in fields and fields[k] else None  # noqa: E731
    return PointSet(
        kind,
        weights=cat("w"),
        xi=cat("xi"),
        patch=cat("patch"),
        mu=cat("mu"),
        element=cat("el"),
        mjac=cat("J"),
        edge=cat("edge"),
        normals=cat("n"),
        tangents=cat("tau"),
        h=cat("h"),
        side=cat("side"),
        t=cat("t"),
        other_patch=cat("o_patch"),
        other_mu=cat("o_mu"),
        other_edge=cat("o_edge"),
    )


@dataclass
class FieldLayout:
    """Unknowns of a (possibly mixed) problem, stacked field after field, followed by scalar multipliers"""
    fields: List[Tuple[str, MultipatchSpace]]
    scalars: List[str] = field(default_factory=list)

    def __post_init__(self):
        self._offsets: Dict[str, Tuple[int, int]] = {}
        start = 0
        for name, space in self.fields:
            self._offsets[name] = (start, start + space.dimension)
            start += space.dimension
        for name in self.scalars:
            self._offsets[name] = (start, start + 1)
            start += 1
        self.size = start

    def slice(self, name: str) -> slice:
        return slice(*self._offsets[name])

    def space(self, name: str) -> MultipatchSpace:
        return dict(self.fields)[name]

    def values(self, state: np.ndarray, points: PointSet, name: str, op: str = "val") -> np.ndarray:
        return points.ops(self.space(name))[op] @ state[self.slice(name)]

    def mask(self, fixed: Dict[str, np.ndarray]) -> np.ndarray:
        """Boolean mask of the unknowns listed (as local dof ids) per field"""
        out = np.zeros(self.size, dtype=bool)
        for name, dofs in fixed.items():
            out[self._offsets[name][0] + np.asarray(dofs, dtype=int)] = True
        return out


@dataclass
class Term:
    """
    Pointwise contribution ``sum_points w * value * test`` to the rows of ``row``.  ``jac`` maps
    ``(column field, operator)`` to the derivative of ``value`` with respect to that operator applied to the field.
    """
    row: str
    test: str
    value: np.ndarray
    jac: Dict[Tuple[str, str], np.ndarray] = field(default_factory=dict)
    domain: str = "cells"


def _check_finite(values: np.ndarray, points: PointSet, what: str):
    bad = np.flatnonzero(~np.isfinite(values))
    if len(bad):
        k = bad[0]
        raise NumericalError(
            f"Non-finite {what} in element {int(points.element[k])} of patch {int(points.patch[k])} "
            f"at mu={points.mu[k].tolist()}"
        )


def assemble(
    terms: Sequence[Term],
    layout: FieldLayout,
    cache: EvalCache,
    jacobian: bool = True,
    threads: Optional[int] = None,
) -> Tuple[np.ndarray, Optional[sparse.csr_matrix]]:
    """Residual vector and (optionally) sparse Jacobian of a list of terms"""

    def _contribution(term: Term):
        points = cache.domain(term.domain)
        value = np.broadcast_to(np.asarray(term.value, dtype=float), (len(points),))
        _check_finite(value, points, "residual")
        T = points.ops(layout.space(term.row))[term.test]
        residual = T.T @ (points.weights * value)
        blocks = []
        if jacobian:
            for (col, op), coeff in term.jac.items():
                coeff = np.broadcast_to(np.asarray(coeff, dtype=float), (len(points),))
                _check_finite(coeff, points, "Jacobian entry")
                O = points.ops(layout.space(col))[op]
                blocks.append((col, (T.T @ sparse.diags(points.weights * coeff) @ O).tocoo()))
        return term.row, residual, blocks

    contributions = map_in_threads(_contribution, terms, threads or config.THREADS)
    r = np.zeros(layout.size)
    rows, cols, vals = [], [], []
    for row, residual, blocks in contributions:
        sl = layout.slice(row)
        r[sl] += residual
        for col, B in blocks:
            rows.append(B.row + sl.start)
            cols.append(B.col + layout.slice(col).start)
            vals.append(B.data)
    if not jacobian:
        return r, None
    if rows:
        J = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(layout.size, layout.size)
        )
    else:
        J = sparse.csr_matrix((layout.size, layout.size))
    return r, J


Evaluator = Callable[[np.ndarray, bool], Tuple[np.ndarray, Optional[sparse.csr_matrix]]]


def form_evaluator(form: Callable[[np.ndarray], Sequence[Term]], layout: FieldLayout, cache: EvalCache) -> Evaluator:
    """Wrap a term generator into ``(state, jacobian) -> (residual, Jacobian)``"""
    def evaluate(state: np.ndarray, jacobian: bool = True):
        return assemble(form(state), layout, cache, jacobian=jacobian)
    return evaluate


@dataclass
class SparseSystem:
    matrix: sparse.csr_matrix
    rhs: np.ndarray
    fixed: np.ndarray
    values: Optional[np.ndarray] = None

    def eliminate(self) -> "SparseSystem":
        """Replace rows and columns of fixed unknowns by identity, moving known columns to the right-hand side"""
        fixed = self.fixed.astype(float)
        free = 1.0 - fixed
        values = np.zeros(len(self.rhs)) if self.values is None else np.where(self.fixed, self.values, 0.0)
        D = sparse.diags(free)
        matrix = (D @ self.matrix @ D + sparse.diags(fixed)).tocsr()
        rhs = free * (self.rhs - self.matrix @ values) + fixed * values
        return SparseSystem(matrix, rhs, self.fixed, values)

    def solve(self) -> np.ndarray:
        reduced = self.eliminate()
        return solve_sparse(reduced.matrix, reduced.rhs)


def solve_sparse(A: sparse.spmatrix, b: np.ndarray) -> np.ndarray:
    """Direct sparse LU solve"""
    A = sparse.csc_matrix(A)
    try:
        lu = splinalg.splu(A)
    except RuntimeError as e:
        raise LinearSolverError(f"Sparse factorisation failed: {e}") from e
    diagonal = np.abs(lu.U.diagonal())
    scale = max(diagonal.max(), 1.0) if len(diagonal) else 1.0
    tiny = np.flatnonzero(diagonal <= 1e-14 * scale)
    if len(tiny):
        column = int(np.flatnonzero(lu.perm_c == tiny[0])[0])
        raise LinearSolverError(f"Singular pivot in column {column}", pivot=column)
    return lu.solve(np.asarray(b, dtype=float))


def mass_matrix(space: MultipatchSpace, cache: EvalCache) -> sparse.csr_matrix:
    V = cache.cells.ops(space)["val"]
    return (V.T @ sparse.diags(cache.cells.weights) @ V).tocsr()


def laplace_matrix(space: MultipatchSpace, cache: EvalCache) -> sparse.csr_matrix:
    ops = cache.cells.ops(space)
    W = sparse.diags(cache.cells.weights)
    return (ops["d1"].T @ W @ ops["d1"] + ops["d2"].T @ W @ ops["d2"]).tocsr()


def l2_project(
    space: MultipatchSpace,
    values: np.ndarray,
    cache: Optional[EvalCache] = None,
    fixed: Optional[np.ndarray] = None,
    fixed_values: Optional[np.ndarray] = None,
) -> np.ndarray:
    """L2 projection of data sampled at the cell quadrature points, optionally with prescribed coefficients"""
    cache = cache or EvalCache.build(space)
    V = cache.cells.ops(space)["val"]
    M = mass_matrix(space, cache)
    values = np.asarray(values, dtype=float)
    rhs = V.T @ (cache.cells.weights[:, None] * values.reshape(len(values), -1))
    mask = np.zeros(space.dimension, dtype=bool)
    if fixed is not None:
        mask[fixed] = True
    out = np.empty_like(rhs)
    for c in range(rhs.shape[1]):
        prescribed = None
        if fixed_values is not None:
            prescribed = np.asarray(fixed_values).reshape(space.dimension, -1)[:, c]
        out[:, c] = SparseSystem(M, rhs[:, c], mask, prescribed).solve()
    return out.reshape((space.dimension,) + values.shape[1:])


def fd_jacobian_check(evaluator: Evaluator, state: np.ndarray, h: float = 1e-6) -> float:
    """Largest deviation between the assembled Jacobian and central differences, relative to the largest entry"""
    _, J = evaluator(state, True)
    J = J.toarray()
    J_fd = np.empty_like(J)
    for k in range(len(state)):
        e = np.zeros(len(state))
        e[k] = h
        plus, _ = evaluator(state + e, False)
        minus, _ = evaluator(state - e, False)
        J_fd[:, k] = (plus - minus) / (2 * h)
    scale = max(np.abs(J_fd).max(), np.finfo(float).tiny)
    return float(np.abs(J - J_fd).max() / scale)
