import numpy as np
import pytest

from harmap.constants import Edge
from harmap.errors import CompatibilityError, GeometryError, InputError, TopologyError
from harmap.maps import GeometryMap
from harmap.samples import (
    conformal,
    conformal_exact,
    four_patch,
    lbend,
    quarter_annulus,
    sample,
    six_patch,
    two_patch_topology,
    unit_square_topology,
)
from harmap.splines import SplineCurve, make_open_knot_vector, uniform_knot_vector
from harmap.topology import (
    BoundaryCorrespondence,
    MultipatchSpace,
    VertexSet,
    bilinear_map,
    build_space,
    build_topology,
    dirichlet_lift,
    edge_point,
    locate,
)

S, E, N, W = Edge.south, Edge.east, Edge.north, Edge.west


def test_unit_square_topology():
    q = unit_square_topology()
    assert q.n_patches == 1
    assert not q.interior_facets
    assert len(q.boundary_edges) == 4


def test_two_patch_topology():
    q = two_patch_topology()
    assert len(q.interior_facets) == 1
    assert len(q.boundary_edges) == 6
    facet = q.interior_facets[0]
    assert {(facet.patch_i, facet.edge_i), (facet.patch_j, facet.edge_j)} == {(0, E), (1, W)}
    assert not facet.flip


@pytest.mark.parametrize("name", ["square", "two-patch", "lbend", "four-patch", "six-patch", "sheared", "hexagon"])
def test_samples_build(name):
    q, F = sample(name)
    assert len(F.curves) == len(q.boundary_sides)


@pytest.mark.parametrize(
    "patches,sides,error",
    [
        ([[0, 1, 1, 3]], [[(0, S)], [(0, E)], [(0, N)], [(0, W)]], TopologyError),
        ([[0, 1, 2, 7]], [[(0, S)], [(0, E)], [(0, N)], [(0, W)]], TopologyError),
        ([[0, 1, 2, 3]], [[(0, S)], [(0, E)], [(0, N)]], TopologyError),
        ([[0, 1, 2, 3]], [[(0, S)], [(0, N)], [(0, E)], [(0, W)]], TopologyError),
        ([[0, 3, 2, 1]], [[(0, W)], [(0, N)], [(0, E)], [(0, S)]], GeometryError),
    ],
)
def test_build_topology_invalid(patches, sides, error):
    with pytest.raises(error):
        build_topology([[0, 0], [1, 0], [1, 1], [0, 1]], patches, sides)


def test_build_topology_edge_shared_three_times():
    vertices = [[0, 0], [1, 0], [1, 1], [0, 1], [0.8, 0.5], [0.2, 0.5], [0, -1], [1, -1]]
    with pytest.raises(TopologyError):
        build_topology(
            vertices,
            [[0, 1, 2, 3], [0, 1, 4, 5], [1, 0, 6, 7]],
            [[(0, S)], [(0, E)], [(0, N)], [(0, W)]],
        )


def test_bilinear_map():
    q = unit_square_topology()
    xi, J = bilinear_map(q, 0, np.array([[0.3, 0.7]]))
    assert np.allclose(xi, [[0.3, 0.7]])
    assert np.allclose(J[0], np.eye(2))

    q = build_topology([[0, 0], [2, 0], [2, 1], [0, 1]], [[0, 1, 2, 3]], [[(0, S)], [(0, E)], [(0, N)], [(0, W)]])
    xi, J = bilinear_map(q, 0, np.array([[0.5, 0.5]]))
    assert np.allclose(xi, [[1.0, 0.5]])
    assert np.allclose(J[0], np.diag([2.0, 1.0]))


def test_edge_point():
    assert np.allclose(edge_point(S, [0.25]), [[0.25, 0.0]])
    assert np.allclose(edge_point(E, [0.25]), [[1.0, 0.25]])
    assert np.allclose(edge_point(N, [0.25]), [[0.25, 1.0]])
    assert np.allclose(edge_point(W, [0.25]), [[0.0, 0.25]])


def test_locate():
    q, _ = four_patch()
    xi = np.array([[0.1, 0.1], [0.9, 0.1], [0.9, 0.9], [0.1, 0.9]])
    patches, mu = locate(q, xi)
    assert patches.tolist() == [0, 1, 2, 3]
    for patch, m, x in zip(patches, mu, xi):
        assert np.allclose(bilinear_map(q, patch, m[None, :])[0], x)

    with pytest.raises(InputError):
        locate(q, np.array([[1.5, 0.5]]))


def test_vertex_set():
    q, _ = four_patch()
    vs = VertexSet.from_quadrangulation(q)
    assert vs.vertex_ids == [1, 3, 5, 7, 8]
    assert len(vs.adjacent[8]) == 4
    assert np.all(vs.d_min > 0)

    q, _ = six_patch()
    vs = VertexSet.from_quadrangulation(q)
    assert len(vs.adjacent[9]) == 3
    assert len(vs.adjacent[10]) == 3


def test_space_counts():
    space = MultipatchSpace.from_degree(unit_square_topology(), 3)
    assert space.dimension == 16
    assert len(space.boundary_dofs) == 12
    assert len(space.interior_dofs) == 4

    space = MultipatchSpace.from_degree(two_patch_topology(), 1)
    assert space.dimension == 6
    assert len(space.interior_dofs) == 0

    space = MultipatchSpace.from_degree(two_patch_topology(), 2, refine=1)
    assert space.dimension == 2 * 16 - 4
    assert pytest.approx(np.hypot(0.25, 0.5)) == space.mesh_size()


def test_space_mismatched_facet():
    q = two_patch_topology()
    coarse, fine = uniform_knot_vector(2, 1), uniform_knot_vector(2, 2)
    with pytest.raises(CompatibilityError):
        build_space(q, [(coarse, coarse), (coarse, fine)])
    # knots along the facet agree, across it they may differ
    space = build_space(q, [(coarse, fine), (fine, fine)])
    assert space.dimension == 3 * 4 + 4 * 4 - 4


def test_space_prolongation():
    coarse = MultipatchSpace.from_degree(two_patch_topology(), 2)
    fine = coarse.refine()
    P = coarse.prolongation(fine)
    assert P.shape == (fine.dimension, coarse.dimension)
    assert coarse.is_nested_in(fine)
    assert not fine.is_nested_in(coarse)

    coeffs = np.random.default_rng(3).normal(size=(coarse.dimension, 2))
    mu = np.random.default_rng(4).random((25, 2))
    for patch in range(2):
        a = coarse.evaluate(patch, mu) @ coeffs
        b = fine.evaluate(patch, mu) @ (P @ coeffs)
        assert np.abs(a - b).max() < 1e-12


def test_correspondence_identity():
    q = two_patch_topology()
    F = BoundaryCorrespondence.identity(q)
    t = np.linspace(0, 1, 5)
    assert np.allclose(F.evaluate_edge(q, 1, S, t), edge_point(S, t) * [0.5, 1] + [0.5, 0])
    assert np.allclose(F.evaluate_edge(q, 0, N, t), np.column_stack([t / 2, np.ones_like(t)]))

    with pytest.raises(InputError):
        F.evaluate_edge(q, 0, E, t)


def test_correspondence_not_closed():
    q = unit_square_topology()
    line = make_open_knot_vector(1)
    curves = [
        SplineCurve(line, ((0, 0), (1, 0))),
        SplineCurve(line, ((1, 0), (1, 1))),
        SplineCurve(line, ((1, 1), (0, 1))),
        SplineCurve(line, ((0, 1), (0.1, 0.1))),
    ]
    with pytest.raises(CompatibilityError):
        BoundaryCorrespondence.from_curves(q, curves)


def test_correspondence_transformed():
    q = unit_square_topology()
    A, b = np.array([[2.0, 0.0], [0.0, 3.0]]), np.array([1.0, -1.0])
    F = BoundaryCorrespondence.identity(q).transformed(A, b)
    assert np.allclose(F.evaluate_edge(q, 0, E, np.array([0.5])), [[3.0, 0.5]])


def test_dirichlet_lift_identity():
    space = MultipatchSpace.from_degree(unit_square_topology(), 3, refine=1)
    x = dirichlet_lift(space, BoundaryCorrespondence.identity(space.quadrangulation))
    greville = space.bases[0].greville()
    assert np.allclose(x[space.boundary_dofs], greville[space.boundary_dofs])
    assert np.allclose(x[space.interior_dofs], 0.0)


@pytest.mark.parametrize("patches", [1, 2])
def test_dirichlet_lift_conformal(patches):
    q, F = conformal(patches)
    space = MultipatchSpace.from_degree(q, 3, refine=1)
    m = GeometryMap(space, dirichlet_lift(space, F))
    t = np.linspace(0, 1, 9)
    for patch, edge in q.boundary_edges:
        xi, _ = bilinear_map(q, patch, edge_point(edge, t))
        assert np.abs(m.evaluate_mu(patch, edge_point(edge, t)) - conformal_exact(xi)).max() < 1e-12


def test_dirichlet_lift_degree_too_low():
    q, F = conformal(1)
    space = MultipatchSpace.from_degree(q, 1, refine=2)
    with pytest.raises(CompatibilityError):
        dirichlet_lift(space, F)


def test_lbend_corners():
    q, F = lbend()
    space = MultipatchSpace.from_degree(q, 2)
    x = dirichlet_lift(space, F)
    # the concave corner is the image of the upper facet endpoint
    assert np.allclose(GeometryMap(space, x).evaluate_mu(0, np.array([[1.0, 1.0]])), [[1.0, 1.0]])


def test_quarter_annulus():
    q, F = quarter_annulus(2)
    assert np.allclose(F.evaluate_edge(q, 0, S, np.array([0.0])), [[1.0, 0.0]])
    assert np.allclose(F.evaluate_edge(q, 1, E, np.array([1.0])), [[0.0, 2.0]])
