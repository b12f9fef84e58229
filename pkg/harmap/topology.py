"""Quadrangulations of the parametric domain and the C0 multipatch spline space built on them"""
from dataclasses import dataclass, field
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from . import config
from .constants import (
    EDGE_CCW,
    EDGE_FIXED_AXIS,
    EDGE_FIXED_VALUE,
    EDGE_VERTICES,
    ENDPOINT_TOLERANCE,
    Edge,
    TargetDomain,
)
from .errors import CompatibilityError, GeometryError, InputError, TopologyError
from .splines import KnotVector, SplineCurve, TensorBasis, interpolate_exact, uniform_knot_vector

logger = logging.getLogger(__name__)
logger.setLevel(config.LOG_LEVEL)


PatchEdge = Tuple[int, Edge]


@dataclass(frozen=True)
class Facet:
    """Interior facet shared by two patches, ``flip`` if their edge parameters run in opposite directions"""
    patch_i: int
    edge_i: Edge
    patch_j: int
    edge_j: Edge
    flip: bool


def edge_point(edge: Edge, t: np.ndarray) -> np.ndarray:
    """Reference square points on ``edge`` at edge parameter ``t``"""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    mu = np.empty((len(t), 2))
    axis = EDGE_FIXED_AXIS[edge]
    mu[:, axis] = EDGE_FIXED_VALUE[edge]
    mu[:, 1 - axis] = t
    return mu


@dataclass
class Quadrangulation:
    vertices: np.ndarray
    patches: List[Tuple[int, int, int, int]]
    boundary_sides: List[List[PatchEdge]]
    interior_facets: List[Facet] = field(default_factory=list)
    orientation: Dict[int, Edge] = field(default_factory=dict)
    target: TargetDomain = TargetDomain.polygon

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    @property
    def boundary_edges(self) -> List[PatchEdge]:
        return [pe for side in self.boundary_sides for pe in side]

    def edge_vertex_ids(self, patch: int, edge: Edge) -> Tuple[int, int]:
        a, b = EDGE_VERTICES[edge]
        return self.patches[patch][a], self.patches[patch][b]

    def corners(self, patch: int) -> np.ndarray:
        return self.vertices[list(self.patches[patch])]

    def side_of(self, patch: int, edge: Edge) -> Optional[int]:
        for k, side in enumerate(self.boundary_sides):
            if (patch, edge) in side:
                return k
        return None

    def boundary_edge_of(self, patch: int) -> Edge:
        """Local edge of a boundary patch lying on the domain boundary"""
        if patch not in self.orientation:
            raise InputError(f"Patch {patch} carries no boundary orientation metadata")
        return self.orientation[patch]

    def boundary_patches(self) -> List[int]:
        return sorted({patch for patch, _ in self.boundary_edges})

    def is_boundary_patch(self, patch: int) -> bool:
        return any(p == patch for p, _ in self.boundary_edges)


def bilinear_map(q: Quadrangulation, patch: int, mu: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Bilinear patch map and its Jacobian ``J[:, a, b] = d xi_a / d mu_b`` at the rows of ``mu``"""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    P0, P1, P2, P3 = q.corners(patch)
    u = mu[:, 0:1]
    v = mu[:, 1:2]
    xi = (1 - u) * (1 - v) * P0 + u * (1 - v) * P1 + u * v * P2 + (1 - u) * v * P3
    du = (1 - v) * (P1 - P0) + v * (P2 - P3)
    dv = (1 - u) * (P3 - P0) + u * (P2 - P1)
    return xi, np.stack([du, dv], axis=-1)


def bilinear_second_derivative(q: Quadrangulation, patch: int) -> np.ndarray:
    """The only nonzero second derivative of the bilinear map, d^2 xi / d mu_1 d mu_2"""
    P0, P1, P2, P3 = q.corners(patch)
    return P0 - P1 + P2 - P3


def locate(q: Quadrangulation, xi: np.ndarray, tolerance: float = 1e-10) -> Tuple[np.ndarray, np.ndarray]:
    """Patch ids and reference coordinates of points of the parametric domain (Newton on the bilinear maps)"""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    patches = np.full(len(xi), -1)
    mus = np.full((len(xi), 2), np.nan)
    for i in range(q.n_patches):
        todo = np.flatnonzero(patches < 0)
        if not len(todo):
            break
        mu = np.full((len(todo), 2), 0.5)
        for _ in range(30):
            x, J = bilinear_map(q, i, mu)
            step = np.linalg.solve(J, (xi[todo] - x)[..., None])[..., 0]
            mu = mu + step
            if np.abs(step).max() < 1e-15:
                break
        inside = np.all((mu > -tolerance) & (mu < 1 + tolerance), axis=1)
        hit = todo[inside]
        patches[hit] = i
        mus[hit] = np.clip(mu[inside], 0.0, 1.0)
    if np.any(patches < 0):
        raise InputError(f"{int((patches < 0).sum())} points lie outside the parametric domain")
    return patches, mus


def _patch_det_corners(corners: np.ndarray) -> np.ndarray:
    dets = []
    for k in range(4):
        here = corners[k]
        nxt = corners[(k + 1) % 4] - here
        prv = corners[(k - 1) % 4] - here
        dets.append(nxt[0] * prv[1] - nxt[1] * prv[0])
    return np.array(dets)


def build_topology(
    vertices: Sequence[Sequence[float]],
    patches: Sequence[Sequence[int]],
    boundary_sides: Sequence[Sequence[Tuple[int, int]]],
    orientation: Optional[Dict[int, int]] = None,
    target: TargetDomain = TargetDomain.polygon,
) -> Quadrangulation:
    """Validate raw connectivity and derive interior facets with their orientation flips"""
    vertices = np.asarray(vertices, dtype=float)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise TopologyError("Vertices must be a list of 2D points")
    patches = [tuple(int(v) for v in p) for p in patches]
    for i, p in enumerate(patches):
        if len(p) != 4 or len(set(p)) != 4:
            raise TopologyError(f"Patch {i} must reference four distinct vertices, got {p}")
        if min(p) < 0 or max(p) >= len(vertices):
            raise TopologyError(f"Patch {i} references a vertex outside 0..{len(vertices) - 1}")
        dets = _patch_det_corners(vertices[list(p)])
        if np.any(dets <= 0):
            raise GeometryError(f"Patch {i} is inverted or degenerate (corner determinants {dets.tolist()})")

    incidence: Dict[frozenset, List[Tuple[int, Edge, Tuple[int, int]]]] = {}
    for i, p in enumerate(patches):
        for edge in Edge:
            a, b = EDGE_VERTICES[edge]
            incidence.setdefault(frozenset((p[a], p[b])), []).append((i, edge, (p[a], p[b])))

    facets = []
    boundary = set()
    for key, owners in incidence.items():
        if len(owners) > 2:
            raise TopologyError(f"Edge {sorted(key)} is shared by {len(owners)} patches")
        if len(owners) == 2:
            (pi, ei, vi), (pj, ej, vj) = owners
            facets.append(Facet(pi, ei, pj, ej, vi[0] != vj[0]))
        else:
            boundary.add(owners[0][:2])

    used = {v for p in patches for v in p}
    euler = len(used) - len(incidence) + len(patches)
    if euler != 1:
        raise TopologyError(f"Parametric domain is not simply connected (V - E + F = {euler})")

    sides = [[(int(pi), Edge(int(e))) for pi, e in side] for side in boundary_sides]
    listed = [pe for side in sides for pe in side]
    if len(listed) != len(set(listed)) or set(listed) != boundary:
        raise TopologyError("Boundary sides must list every boundary edge exactly once")

    q = Quadrangulation(vertices, patches, sides, facets, target=target)
    chain = [_ccw_vertices(q, pe) for pe in listed]
    for k, (_, end) in enumerate(chain):
        if chain[(k + 1) % len(chain)][0] != end:
            raise TopologyError("Boundary sides must traverse the boundary counterclockwise without gaps")

    if orientation is None:
        orientation = {}
        for pi in q.boundary_patches():
            edges = [e for p, e in listed if p == pi]
            if len(edges) == 1:
                orientation[pi] = edges[0]
    for pi, e in orientation.items():
        if (int(pi), Edge(int(e))) not in boundary:
            raise TopologyError(f"Orientation of patch {pi} names the interior edge {Edge(int(e)).name}")
    q.orientation = {int(pi): Edge(int(e)) for pi, e in orientation.items()}
    logger.debug(f"Quadrangulation with {len(patches)} patches, {len(facets)} interior facets")
    return q


def _ccw_vertices(q: Quadrangulation, pe: PatchEdge) -> Tuple[int, int]:
    a, b = q.edge_vertex_ids(*pe)
    return (a, b) if EDGE_CCW[pe[1]] > 0 else (b, a)


@dataclass
class VertexSet:
    """Patch vertices shared by at least two patches, with the patches (and local corners) meeting there"""
    vertex_ids: List[int]
    adjacent: Dict[int, List[Tuple[int, int]]]
    d_min: np.ndarray

    @classmethod
    def from_quadrangulation(cls, q: Quadrangulation, images: Optional[np.ndarray] = None) -> "VertexSet":
        """``images`` optionally replaces vertex positions (e.g. by their images under a controlmap)"""
        adjacent: Dict[int, List[Tuple[int, int]]] = {}
        for i, p in enumerate(q.patches):
            for corner, v in enumerate(p):
                adjacent.setdefault(v, []).append((i, corner))
        ids = sorted(v for v, adj in adjacent.items() if len(adj) >= 2)
        points = q.vertices if images is None else np.asarray(images)
        d_min = []
        for v in ids:
            others = [w for w in ids if w != v] or [w for w in adjacent if w != v]
            d_min.append(min(np.linalg.norm(points[v] - points[w]) for w in others))
        d_min = np.asarray(d_min)
        if np.any(d_min <= 0):
            raise TopologyError("Shared vertices must be distinct")
        return cls(ids, {v: adjacent[v] for v in ids}, d_min)


def edge_local_dofs(basis: TensorBasis, edge: Edge) -> np.ndarray:
    """Local indices of the functions nonzero on ``edge``, ordered along increasing edge parameter"""
    nu, nv = basis.shape
    if edge == Edge.south:
        return np.arange(nu)
    if edge == Edge.north:
        return np.arange(nu) + nu * (nv - 1)
    if edge == Edge.west:
        return nu * np.arange(nv)
    return nu - 1 + nu * np.arange(nv)


def edge_knot_vector(basis: TensorBasis, edge: Edge) -> KnotVector:
    return basis.kv_u if EDGE_FIXED_AXIS[edge] == 1 else basis.kv_v


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


@dataclass(eq=False)
class MultipatchSpace:
    quadrangulation: Quadrangulation
    bases: List[TensorBasis]
    local_to_global: List[np.ndarray]
    dimension: int
    boundary_dofs: np.ndarray
    interior_dofs: np.ndarray
    cache: Dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, q: Quadrangulation, bases: Sequence[TensorBasis]) -> "MultipatchSpace":
        """Merge facet-adjacent degrees of freedom into a globally continuous space"""
        bases = list(bases)
        if len(bases) != q.n_patches:
            raise InputError(f"Expected {q.n_patches} patch bases, got {len(bases)}")
        offsets = np.concatenate([[0], np.cumsum([b.dimension for b in bases])])
        uf = _UnionFind(int(offsets[-1]))
        for f in q.interior_facets:
            kv_i = edge_knot_vector(bases[f.patch_i], f.edge_i)
            kv_j = edge_knot_vector(bases[f.patch_j], f.edge_j)
            if not kv_i.is_close(kv_j.reversed() if f.flip else kv_j):
                raise CompatibilityError(
                    f"Facet between patches {f.patch_i} and {f.patch_j} has mismatched knot vectors "
                    f"{kv_i.knots} and {kv_j.knots}"
                )
            dofs_i = edge_local_dofs(bases[f.patch_i], f.edge_i) + offsets[f.patch_i]
            dofs_j = edge_local_dofs(bases[f.patch_j], f.edge_j) + offsets[f.patch_j]
            if f.flip:
                dofs_j = dofs_j[::-1]
            for a, b in zip(dofs_i, dofs_j):
                uf.union(int(a), int(b))

        numbering: Dict[int, int] = {}
        roots = [uf.find(k) for k in range(int(offsets[-1]))]
        for r in roots:
            if r not in numbering:
                numbering[r] = len(numbering)
        glob = np.array([numbering[r] for r in roots])
        l2g = [glob[offsets[i]:offsets[i + 1]] for i in range(len(bases))]

        boundary = set()
        for pi, e in q.boundary_edges:
            boundary.update(l2g[pi][edge_local_dofs(bases[pi], e)].tolist())
        boundary = np.array(sorted(boundary), dtype=int)
        interior = np.setdiff1d(np.arange(len(numbering)), boundary)
        return cls(q, bases, l2g, len(numbering), boundary, interior)

    @classmethod
    def from_degree(cls, q: Quadrangulation, degree: int, refine: int = 0) -> "MultipatchSpace":
        """Uniform space with ``2**refine`` elements per patch direction"""
        kv = uniform_knot_vector(degree, 2 ** refine)
        return cls.build(q, [TensorBasis(kv, kv) for _ in q.patches])

    @property
    def degree(self) -> int:
        return max(b.degree for b in self.bases)

    @property
    def n_patches(self) -> int:
        return len(self.bases)

    def refine(self) -> "MultipatchSpace":
        return MultipatchSpace.build(self.quadrangulation, [b.refine() for b in self.bases])

    def to_global(self, patch: int, local: sparse.spmatrix) -> sparse.csr_matrix:
        """Reindex a matrix whose columns are local basis functions of ``patch``"""
        local = local.tocsr()
        return sparse.csr_matrix(
            (local.data, self.local_to_global[patch][local.indices], local.indptr),
            shape=(local.shape[0], self.dimension),
        )

    def evaluate(self, patch: int, mu: np.ndarray, du: int = 0, dv: int = 0) -> sparse.csr_matrix:
        return self.to_global(patch, self.bases[patch].evaluate(mu, du, dv))

    def edge_dofs(self, patch: int, edge: Edge) -> np.ndarray:
        return self.local_to_global[patch][edge_local_dofs(self.bases[patch], edge)]

    def edge_knot_vector(self, patch: int, edge: Edge) -> KnotVector:
        return edge_knot_vector(self.bases[patch], edge)

    def prolongation(self, fine: "MultipatchSpace") -> sparse.csr_matrix:
        """Global prolongation from this space into a patchwise nested ``fine`` space"""
        qc, qf = self.quadrangulation, fine.quadrangulation
        if qc.patches != qf.patches or not np.allclose(qc.vertices, qf.vertices):
            raise CompatibilityError("Spaces live on different quadrangulations")
        rows, cols, vals = [], [], []
        seen = np.zeros(fine.dimension, dtype=bool)
        for i, (bc, bf) in enumerate(zip(self.bases, fine.bases)):
            P = bc.prolongation(bf).tocoo()
            g_rows = fine.local_to_global[i][P.row]
            keep = ~seen[g_rows]
            rows.append(g_rows[keep])
            cols.append(self.local_to_global[i][P.col][keep])
            vals.append(P.data[keep])
            seen[fine.local_to_global[i]] = True
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(fine.dimension, self.dimension),
        )

    def is_nested_in(self, fine: "MultipatchSpace") -> bool:
        try:
            self.prolongation(fine)
        except CompatibilityError:
            return False
        return True

    def mesh_size(self) -> float:
        """Largest parametric element diameter"""
        h = 0.0
        for i, b in enumerate(self.bases):
            for (a0, a1), (b0, b1) in b.elements:
                corners, _ = bilinear_map(
                    self.quadrangulation, i, np.array([[a0, b0], [a1, b0], [a1, b1], [a0, b1]])
                )
                h = max(h, np.linalg.norm(corners[2] - corners[0]), np.linalg.norm(corners[3] - corners[1]))
        return h


def build_space(q: Quadrangulation, knot_vectors: Sequence[Tuple[KnotVector, KnotVector]]) -> MultipatchSpace:
    return MultipatchSpace.build(q, [TensorBasis(ku, kv) for ku, kv in knot_vectors])


@dataclass
class BoundaryCorrespondence:
    """
    One spline curve per boundary side, traversed counterclockwise.  ``breaks[k]`` splits the parameter range of
    side ``k`` among its patch edges.
    """
    curves: List[SplineCurve]
    breaks: List[np.ndarray]

    def validate(self, q: Quadrangulation):
        if len(self.curves) != len(q.boundary_sides):
            raise CompatibilityError(
                f"Boundary correspondence has {len(self.curves)} curves for {len(q.boundary_sides)} sides"
            )
        for k, side in enumerate(q.boundary_sides):
            b = np.asarray(self.breaks[k])
            c0, c1 = self.curves[k].kv.domain
            if len(b) != len(side) + 1 or np.any(np.diff(b) <= 0) or b[0] != c0 or b[-1] != c1:
                raise CompatibilityError(f"Side {k} breaks {list(b)} do not split its curve into {len(side)} edges")
        for k, curve in enumerate(self.curves):
            nxt = self.curves[(k + 1) % len(self.curves)]
            if np.linalg.norm(curve.end - nxt.start) > ENDPOINT_TOLERANCE:
                raise CompatibilityError(f"Boundary curves {k} and {(k + 1) % len(self.curves)} do not share an endpoint")

    @classmethod
    def from_curves(cls, q: Quadrangulation, curves: Sequence[SplineCurve], breaks=None) -> "BoundaryCorrespondence":
        if breaks is None:
            breaks = [
                np.linspace(*c.kv.domain, len(side) + 1) for c, side in zip(curves, q.boundary_sides)
            ]
        F = cls(list(curves), [np.asarray(b, dtype=float) for b in breaks])
        F.validate(q)
        return F

    @classmethod
    def identity(cls, q: Quadrangulation) -> "BoundaryCorrespondence":
        """Piecewise linear correspondence mapping every boundary edge onto itself"""
        curves = []
        for side in q.boundary_sides:
            chain = [_ccw_vertices(q, pe) for pe in side]
            points = q.vertices[[chain[0][0]] + [end for _, end in chain]]
            kv = uniform_knot_vector(1, len(side))
            curves.append(SplineCurve(kv, tuple(map(tuple, points))))
        return cls.from_curves(q, curves, [c.kv.breaks for c in curves])

    def transformed(self, A: np.ndarray, b: np.ndarray) -> "BoundaryCorrespondence":
        """Image under the affine map ``x -> A x + b``"""
        A = np.asarray(A, dtype=float)
        curves = [SplineCurve(c.kv, tuple(map(tuple, c.control_points @ A.T + b))) for c in self.curves]
        return BoundaryCorrespondence(curves, [np.array(b_) for b_ in self.breaks])

    def edge_parameter(self, q: Quadrangulation, patch: int, edge: Edge, u: np.ndarray) -> Tuple[int, np.ndarray]:
        """Side index and side parameter of edge parameter ``u`` on a boundary edge"""
        k = q.side_of(patch, edge)
        if k is None:
            raise InputError(f"Edge {edge.name} of patch {patch} is not a boundary edge")
        pos = q.boundary_sides[k].index((patch, edge))
        a, b = self.breaks[k][pos], self.breaks[k][pos + 1]
        u = np.asarray(u, dtype=float)
        return k, (a + (b - a) * u if EDGE_CCW[edge] > 0 else b - (b - a) * u)

    def evaluate_edge(self, q: Quadrangulation, patch: int, edge: Edge, u: np.ndarray) -> np.ndarray:
        k, t = self.edge_parameter(q, patch, edge, u)
        return self.curves[k].evaluate(t)


def dirichlet_lift(space: MultipatchSpace, F: BoundaryCorrespondence) -> np.ndarray:
    """Coefficients reproducing ``F`` exactly on the boundary, zero in the interior"""
    q = space.quadrangulation
    x = np.zeros((space.dimension, 2))
    assigned = np.zeros(space.dimension, dtype=bool)
    for patch, edge in q.boundary_edges:
        kv = space.edge_knot_vector(patch, edge)
        coeffs = interpolate_exact(lambda u: F.evaluate_edge(q, patch, edge, u), kv)
        dofs = space.edge_dofs(patch, edge)
        clash = assigned[dofs] & (np.linalg.norm(x[dofs] - coeffs, axis=1) > ENDPOINT_TOLERANCE)
        if np.any(clash):
            raise CompatibilityError(f"Boundary data is discontinuous at a corner of patch {patch}")
        x[dofs] = coeffs
        assigned[dofs] = True
    return x


def refine_space(space: MultipatchSpace, levels: int = 1) -> MultipatchSpace:
    for _ in range(levels):
        space = space.refine()
    return space
