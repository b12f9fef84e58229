import numpy as np
import pytest
from scipy import sparse

from harmap import config
from harmap.assembly import (
    EvalCache,
    FieldLayout,
    QuadratureRule,
    SparseSystem,
    Term,
    assemble,
    fd_jacobian_check,
    l2_project,
    laplace_matrix,
    mass_matrix,
    solve_sparse,
)
from harmap.errors import LinearSolverError, NumericalError
from harmap.maps import GeometryMap, identity_coefficients
from harmap.samples import two_patch_topology, unit_square_topology
from harmap.splines import make_open_knot_vector, uniform_knot_vector
from harmap.topology import MultipatchSpace, build_space


def test_quadrature_exact():
    rule = QuadratureRule(3)
    t, w, spans = rule.line_points(uniform_knot_vector(2, 4))
    assert len(t) == 12
    assert set(spans.tolist()) == {0, 1, 2, 3}
    assert pytest.approx(1 / 6, abs=1e-14) == w @ t ** 5


def test_cell_points():
    space = MultipatchSpace.from_degree(unit_square_topology(), 2, refine=1)
    mu, w, elements = QuadratureRule(3).cell_points(space.bases[0])
    assert mu.shape == (4 * 9, 2)
    assert pytest.approx(1.0, abs=1e-14) == w.sum()
    assert pytest.approx(1 / 9, abs=1e-14) == w @ (mu[:, 0] ** 2 * mu[:, 1] ** 2)
    assert elements.max() == 3


def test_eval_cache_points():
    space = MultipatchSpace.from_degree(two_patch_topology(), 2, refine=1)
    cache = EvalCache.build(space, 3)
    assert len(cache.cells) == 2 * 4 * 9
    # one facet with two elements, six boundary edges with two elements each
    assert len(cache.facets) == 2 * 3
    assert len(cache.boundary) == 6 * 2 * 3
    assert pytest.approx(1.0, abs=1e-14) == cache.cells.weights.sum()
    assert pytest.approx(1.0, abs=1e-14) == cache.facets.weights.sum()
    assert pytest.approx(4.0, abs=1e-14) == cache.boundary.weights.sum()
    assert np.allclose(np.abs(cache.facets.normals), [1.0, 0.0])


def test_facet_penalty_length_graded():
    """Both sides of a facet see the same penalty length, the mean of their element heights"""
    kv = uniform_knot_vector(2, 2)
    graded = make_open_knot_vector(2, [0.5, 0.75])
    space = build_space(two_patch_topology(), [(graded, kv), (kv, kv)])
    cache = EvalCache.build(space, 3)
    # heights 0.25 * 0.5 and 0.5 * 0.5 on the two half squares
    assert np.allclose(cache.facets.h, 0.5 * (0.125 + 0.25))

    uniform = build_space(two_patch_topology(), [(kv, kv), (kv, kv)])
    assert np.allclose(EvalCache.build(uniform, 3).facets.h, 0.25)


def test_eval_cache_memoised(monkeypatch):
    space = MultipatchSpace.from_degree(unit_square_topology(), 2)
    assert EvalCache.build(space, 3) is EvalCache.build(space, 3)
    monkeypatch.setattr(config, "ENABLE_EVAL_CACHE", False)
    assert EvalCache.build(space, 4) is not EvalCache.build(space, 4)


def test_mass_matrix():
    space = MultipatchSpace.from_degree(unit_square_topology(), 1)
    M = mass_matrix(space, EvalCache.build(space))
    assert pytest.approx(1.0, abs=1e-14) == M.sum()
    assert np.allclose(np.asarray(M.sum(axis=1)).ravel(), 0.25)


@pytest.mark.parametrize("degree,refine", [(1, 1), (2, 2), (3, 1)])
def test_laplace_matrix_constant(degree, refine):
    space = MultipatchSpace.from_degree(two_patch_topology(), degree, refine)
    L = laplace_matrix(space, EvalCache.build(space))
    assert np.abs(L @ np.ones(space.dimension)).max() < 1e-13
    assert abs(L - L.T).max() < 1e-14


def test_laplace_matrix_bilinear_stencil():
    space = MultipatchSpace.from_degree(unit_square_topology(), 1, refine=1)
    L = laplace_matrix(space, EvalCache.build(space))
    (center,) = space.interior_dofs
    assert pytest.approx(8 / 3, abs=1e-13) == L[center, center]


def test_solve_sparse():
    assert np.allclose(solve_sparse(sparse.identity(3), np.array([1.0, 2.0, 3.0])), [1, 2, 3])
    assert np.allclose(solve_sparse(sparse.csr_matrix([[2.0, 1.0], [1.0, 2.0]]), np.array([3.0, 3.0])), [1, 1])

    rng = np.random.default_rng(5)
    B = sparse.random(50, 50, density=0.1, random_state=6)
    A = (B @ B.T + 50 * sparse.identity(50)).tocsr()
    b = rng.normal(size=50)
    assert np.linalg.norm(A @ solve_sparse(A, b) - b) < 1e-10


@pytest.mark.parametrize("matrix", [[[1.0, 1.0], [1.0, 1.0]], [[1.0, 0.0], [0.0, 0.0]]])
def test_solve_sparse_singular(matrix):
    with pytest.raises(LinearSolverError):
        solve_sparse(sparse.csr_matrix(matrix), np.ones(2))


def test_sparse_system_elimination():
    A = sparse.csr_matrix([[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]])
    fixed = np.array([True, False, True])
    x = SparseSystem(A, np.zeros(3), fixed, np.array([1.0, 0.0, 3.0])).solve()
    assert np.allclose(x, [1.0, 2.0, 3.0])


def test_assemble_threads_agree():
    space = MultipatchSpace.from_degree(two_patch_topology(), 2, refine=1)
    cache = EvalCache.build(space)
    layout = FieldLayout([("u", space)])
    u = np.random.default_rng(7).normal(size=space.dimension)

    def terms(state):
        grad = [layout.values(state, cache.cells, "u", op) for op in ("d1", "d2")]
        return [
            Term("u", op, g ** 3, {("u", op): 3 * g ** 2}) for op, g in zip(("d1", "d2"), grad)
        ]

    r1, J1 = assemble(terms(u), layout, cache, threads=1)
    r4, J4 = assemble(terms(u), layout, cache, threads=4)
    assert np.array_equal(r1, r4)
    assert abs(J1 - J4).max() == 0

    evaluator = lambda state, jacobian=True: assemble(terms(state), layout, cache, jacobian)  # noqa: E731
    assert fd_jacobian_check(evaluator, u) < 1e-7


def test_assemble_non_finite():
    space = MultipatchSpace.from_degree(unit_square_topology(), 1)
    cache = EvalCache.build(space)
    layout = FieldLayout([("u", space)])
    value = np.ones(len(cache.cells))
    value[3] = np.nan
    with pytest.raises(NumericalError):
        assemble([Term("u", "val", value)], layout, cache)


def test_field_layout():
    space = MultipatchSpace.from_degree(unit_square_topology(), 2)
    layout = FieldLayout([("a", space), ("b", space)], scalars=["p"])
    assert layout.size == 2 * 9 + 1
    assert layout.slice("b") == slice(9, 18)
    mask = layout.mask({"b": [0, 2], "p": [0]})
    assert np.flatnonzero(mask).tolist() == [9, 11, 18]


def test_fd_jacobian_check_linear():
    A = sparse.csr_matrix([[3.0, 1.0], [0.5, 2.0]])
    b = np.array([1.0, -1.0])
    evaluator = lambda x, jacobian=True: (A @ x - b, A if jacobian else None)  # noqa: E731
    assert fd_jacobian_check(evaluator, np.array([0.3, 0.2])) < 1e-9


def test_l2_project_reproduces_spline():
    space = MultipatchSpace.from_degree(two_patch_topology(), 2, refine=1)
    cache = EvalCache.build(space)
    coeffs = identity_coefficients(space)
    values = cache.cells.ops(space)["val"] @ coeffs
    assert np.abs(l2_project(space, values, cache) - coeffs).max() < 1e-12
    m = GeometryMap.identity(space)
    assert np.allclose(m.coeffs, coeffs)
