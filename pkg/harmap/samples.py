"""Synthetic geometries used by the tests, the refinement studies and the bundled geometry files"""
import logging
import os
from typing import Callable, Dict, Tuple

import numpy as np

from . import config
from .constants import EDGE_CCW, Edge, TargetDomain
from .errors import InputError
from .splines import SplineCurve, make_open_knot_vector
from .topology import BoundaryCorrespondence, Quadrangulation, build_topology

logger = logging.getLogger(__name__)
logger.setLevel(config.LOG_LEVEL)

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")

S, E, N, W = Edge.south, Edge.east, Edge.north, Edge.west

Sample = Tuple[Quadrangulation, BoundaryCorrespondence]


def _side_chain(q: Quadrangulation, side) -> list:
    """Vertex ids along a boundary side in counterclockwise order"""
    chain = []
    for patch, edge in side:
        a, b = q.edge_vertex_ids(patch, edge)
        a, b = (a, b) if EDGE_CCW[edge] > 0 else (b, a)
        if not chain:
            chain.append(a)
        chain.append(b)
    return chain


def polygon_correspondence(q: Quadrangulation, image: Callable[[np.ndarray], np.ndarray]) -> BoundaryCorrespondence:
    """Piecewise linear correspondence through the images of the boundary vertices"""
    curves = []
    for side in q.boundary_sides:
        chain = _side_chain(q, side)
        points = np.asarray(image(q.vertices[chain]), dtype=float)
        kv = make_open_knot_vector(1, [k / len(side) for k in range(1, len(side))])
        curves.append(SplineCurve(kv, tuple(map(tuple, points))))
    return BoundaryCorrespondence.from_curves(q, curves, [c.kv.breaks for c in curves])


def complex_correspondence(q: Quadrangulation, w: Callable, dw: Callable) -> BoundaryCorrespondence:
    """
    Image of straight boundary sides under a quadratic polynomial ``w`` of ``z = xi_1 + i xi_2``, represented
    exactly by one quadratic Bezier curve per side
    """
    curves = []
    for side in q.boundary_sides:
        chain = _side_chain(q, side)
        a, b = (complex(*q.vertices[chain[k]]) for k in (0, -1))
        p0, p2 = w(a), w(b)
        p1 = p0 + dw(a) * (b - a) / 2
        points = tuple((z.real, z.imag) for z in (p0, p1, p2))
        curves.append(SplineCurve(make_open_knot_vector(2), points))
    breaks = []
    for side in q.boundary_sides:
        chain = _side_chain(q, side)
        xi = q.vertices[chain]
        length = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xi, axis=0), axis=1))])
        breaks.append(length / length[-1])
    return BoundaryCorrespondence.from_curves(q, curves, breaks)


def unit_square_topology() -> Quadrangulation:
    return build_topology([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2, 3]], [[(0, S)], [(0, E)], [(0, N)], [(0, W)]])


def two_patch_topology() -> Quadrangulation:
    """Unit square split along ``xi_1 = 1/2``, one parametric side per square side"""
    return build_topology(
        [[0, 0], [0.5, 0], [1, 0], [1, 1], [0.5, 1], [0, 1]],
        [[0, 1, 4, 5], [1, 2, 3, 4]],
        [[(0, S), (1, S)], [(1, E)], [(1, N), (0, N)], [(0, W)]],
    )


def unit_square() -> Sample:
    q = unit_square_topology()
    return q, BoundaryCorrespondence.identity(q)


def two_patch_square() -> Sample:
    q = two_patch_topology()
    return q, BoundaryCorrespondence.identity(q)


# physical L-bend corners, the concave corner is the image of the facet endpoint (1/2, 1)
LBEND_IMAGES = {0: (0.0, 2.0), 1: (0.0, 0.0), 2: (2.0, 0.0), 3: (2.0, 1.0), 4: (1.0, 1.0), 5: (1.0, 2.0)}
LBEND_CONCAVE_VERTEX = 4


def lbend() -> Sample:
    q = two_patch_topology()
    lookup = {tuple(q.vertices[v]): p for v, p in LBEND_IMAGES.items()}
    return q, polygon_correspondence(q, lambda xi: [lookup[tuple(p)] for p in xi])


def conformal_w(z):
    return z + 0.1 * z ** 2


def conformal_dw(z):
    return 1 + 0.2 * z


def conformal(patches: int = 1) -> Sample:
    """Image of the unit square under ``w(z) = z + z^2 / 10``, which is its own inversely harmonic map"""
    if patches not in (1, 2):
        raise InputError(f"The conformal sample exists with one or two patches, got {patches}")
    q = unit_square_topology() if patches == 1 else two_patch_topology()
    return q, complex_correspondence(q, conformal_w, conformal_dw)


def conformal_exact(xi: np.ndarray) -> np.ndarray:
    z = conformal_w(xi[:, 0] + 1j * xi[:, 1])
    return np.column_stack([z.real, z.imag])


def four_patch(interior=(0.6, 0.6)) -> Sample:
    """Unit square around one interior vertex, patch corners at the side midpoints"""
    vertices = [[0, 0], [0.5, 0], [1, 0], [1, 0.5], [1, 1], [0.5, 1], [0, 1], [0, 0.5], list(interior)]
    q = build_topology(
        vertices,
        [[0, 1, 8, 7], [1, 2, 3, 8], [8, 3, 4, 5], [7, 8, 5, 6]],
        [[(0, S), (1, S)], [(1, E), (2, E)], [(2, N), (3, N)], [(3, W), (0, W)]],
    )
    return q, BoundaryCorrespondence.identity(q)


def six_patch() -> Sample:
    """Unit square covered by two fans of three patches around the valence three vertices 9 and 10"""
    vertices = [
        [0, 0], [0.25, 0], [0.5, 0], [0.75, 0], [1, 0], [1, 1], [0.5, 1], [0, 1], [0.5, 0.5],
        [0.25, 0.45], [0.75, 0.55],
    ]
    q = build_topology(
        vertices,
        [[0, 1, 9, 7], [1, 2, 8, 9], [9, 8, 6, 7], [3, 4, 5, 10], [2, 3, 10, 8], [8, 10, 5, 6]],
        [[(0, S), (1, S), (4, S), (3, S)], [(3, E)], [(5, N), (2, N)], [(0, W)]],
    )
    return q, BoundaryCorrespondence.identity(q)


def framed_square_topology(inner: float = 0.3) -> Quadrangulation:
    """Unit square as a central patch framed by four trapezoids, each touching the boundary with its south edge"""
    a, b = inner, 1 - inner
    return build_topology(
        [[0, 0], [1, 0], [1, 1], [0, 1], [a, a], [b, a], [b, b], [a, b]],
        [[4, 5, 6, 7], [0, 1, 5, 4], [1, 2, 6, 5], [2, 3, 7, 6], [3, 0, 4, 7]],
        [[(1, S)], [(2, S)], [(3, S)], [(4, S)]],
        orientation={k: S for k in range(1, 5)},
    )


def sheared_square(shear: float = 0.5) -> Sample:
    """Parallelogram ``(xi_1 + shear xi_2, xi_2)`` over the framed square covering"""
    q = framed_square_topology()
    A = np.array([[1.0, shear], [0.0, 1.0]])
    return q, polygon_correspondence(q, lambda xi: xi @ A.T)


def hexagon_topology(radius: float = 1.0, target: TargetDomain = TargetDomain.polygon) -> Quadrangulation:
    """
    Regular hexagon centred at the origin: a ring of six trapezoids, each touching the boundary with its south
    edge, around an inner hexagon split into three patches
    """
    angles = np.arange(6) * np.pi / 3
    outer = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    vertices = np.vstack([outer, outer / 2, [[0.0, 0.0]]])
    ring = [[k, (k + 1) % 6, 6 + (k + 1) % 6, 6 + k] for k in range(6)]
    fan = [[12, 6 + 2 * j, 7 + 2 * j, 6 + (2 * j + 2) % 6] for j in range(3)]
    return build_topology(
        vertices, ring + fan, [[(k, S)] for k in range(6)], orientation={k: S for k in range(6)}, target=target
    )


def hexagon(target: TargetDomain = TargetDomain.polygon) -> Sample:
    q = hexagon_topology(target=TargetDomain(target))
    return q, BoundaryCorrespondence.identity(q)


SKEW_CORNERS = np.array([[0.0, 0.0], [2.0, 0.0], [1.5, 1.5], [0.0, 1.0]])


def skew_quad() -> Sample:
    """Skew quadrilateral over a two by two patch grid, boundary vertices placed by the bilinear corner blend"""
    vertices = [[c / 2, r / 2] for r in range(3) for c in range(3)]
    patches = [[3 * i + j, 3 * i + j + 1, 3 * (i + 1) + j + 1, 3 * (i + 1) + j] for i in range(2) for j in range(2)]
    q = build_topology(
        vertices, patches, [[(0, S), (1, S)], [(1, E), (3, E)], [(3, N), (2, N)], [(2, W), (0, W)]]
    )
    P0, P1, P2, P3 = SKEW_CORNERS

    def image(xi):
        u, v = xi[:, :1], xi[:, 1:]
        return (1 - u) * (1 - v) * P0 + u * (1 - v) * P1 + u * v * P2 + (1 - u) * v * P3

    return q, polygon_correspondence(q, image)


def quarter_annulus(patches: int = 1) -> Sample:
    """
    Quarter annulus between radii one and two, arcs replaced by quadratic Bezier curves tangent to the circles at
    their endpoints so that all four corners stay right angles
    """
    if patches not in (1, 2):
        raise InputError(f"The quarter annulus sample exists with one or two patches, got {patches}")
    q = unit_square_topology() if patches == 1 else two_patch_topology()
    line = make_open_knot_vector(1)
    arc = make_open_knot_vector(2)
    curves = [
        SplineCurve(line, ((1.0, 0.0), (2.0, 0.0))),
        SplineCurve(arc, ((2.0, 0.0), (2.0, 2.0), (0.0, 2.0))),
        SplineCurve(line, ((0.0, 2.0), (0.0, 1.0))),
        SplineCurve(arc, ((0.0, 1.0), (1.0, 1.0), (1.0, 0.0))),
    ]
    return q, BoundaryCorrespondence.from_curves(q, curves)


SAMPLES: Dict[str, Callable[[], Sample]] = {
    "square": unit_square,
    "two-patch": two_patch_square,
    "lbend": lbend,
    "conformal": lambda: conformal(1),
    "conformal-2": lambda: conformal(2),
    "four-patch": four_patch,
    "six-patch": six_patch,
    "sheared": sheared_square,
    "hexagon": hexagon,
    "disc": lambda: hexagon(TargetDomain.unit_disc),
    "skew": skew_quad,
    "annulus": quarter_annulus,
    "annulus-2": lambda: quarter_annulus(2),
}

# Samples shipped as geometry files under ``harmap/data``
BUNDLED = {"square": "unit_square.json", "lbend": "lbend.json", "conformal": "conformal.json"}


def sample(name: str) -> Sample:
    if name not in SAMPLES:
        raise InputError(f"Unknown sample '{name}', expected one of {sorted(SAMPLES)}")
    logger.debug(f"Building sample geometry {name}")
    return SAMPLES[name]()


def bundled_path(name: str) -> str:
    if name not in BUNDLED:
        raise InputError(f"No bundled geometry file for '{name}', expected one of {sorted(BUNDLED)}")
    return os.path.join(DATA_DIR, BUNDLED[name])