import math

from hypothesis import given, strategies as st
import numpy as np
import pytest
from scipy import sparse

from harmap.assembly import EvalCache, fd_jacobian_check
from harmap.constants import Linearisation, Scheme
from harmap.errors import BarrierError, ConvergenceError, InputError
from harmap.maps import GeometryMap
from harmap.metrics import bijectivity_report, quality_report
from harmap.parameterise import parameterise
from harmap.samples import conformal, lbend, quarter_annulus, unit_square
from harmap.solvers import (
    SolverConfig,
    elliptic_coefficients,
    fixed_point_driver,
    forward_laplace,
    geometry_layout,
    minimise_winslow,
    newton_driver,
    regularise_det,
    solve_weak_form,
    weak_form_evaluator,
    winslow_terms,
    winslow_value,
)
from harmap.topology import MultipatchSpace

finite = st.floats(min_value=-10, max_value=10, allow_nan=False)


def test_solver_config_defaults():
    cfg = SolverConfig()
    assert cfg.scheme == Scheme.c0dg
    assert cfg.mu == cfg.mu_newton
    assert cfg.eps_schedule == pytest.approx([1e-4, 1e-5, 1e-6, 1e-7, 1e-8])
    assert SolverConfig(eps_continuation=False).eps_schedule == [1e-4]
    assert SolverConfig(linearisation="fixed-point").mu == 1e-4
    assert SolverConfig(scheme="rotfree").as_dict()["scheme"] == "rotfree"


@pytest.mark.parametrize(
    "kwargs",
    [{"eps_weak": -1.0}, {"eta_dg": 0.0}, {"alpha_rot": 1.5}, {"line_search_factor": 1.0}, {"max_iter": 0}],
)
def test_solver_config_invalid(kwargs):
    with pytest.raises(InputError):
        SolverConfig(**kwargs)


def test_solver_config_unknown_scheme():
    with pytest.raises(ValueError):
        SolverConfig(scheme="multigrid")


def test_elliptic_coefficients():
    c = elliptic_coefficients(np.eye(2)[None])
    assert np.allclose(c.A[0], np.eye(2))
    assert np.allclose(c.C[0], np.eye(2))
    assert pytest.approx(1.0) == c.gamma[0]

    c = elliptic_coefficients(np.diag([2.0, 1.0])[None])
    assert np.allclose(c.A[0], np.diag([1.0, 4.0]))
    assert pytest.approx(5 / 17) == c.gamma[0]

    c = elliptic_coefficients(np.eye(2)[None], mu=0.5)
    assert np.allclose(c.A_mu[0], 1.5 * np.eye(2))


@given(st.lists(finite, min_size=4, max_size=4))
def test_elliptic_coefficients_factorised(entries):
    J = np.array(entries).reshape(1, 2, 2)
    c = elliptic_coefficients(J)
    assert np.allclose(c.A[0], c.C[0].T @ c.C[0], atol=1e-9)
    assert pytest.approx(np.linalg.det(J[0]) ** 2, abs=1e-6) == np.linalg.det(c.A[0])


@given(x=st.floats(min_value=-10, max_value=10), eps=st.floats(min_value=1e-3, max_value=1.0))
def test_regularise_det_positive(x, eps):
    R, dR = regularise_det(np.array([x]), eps)
    assert R[0] > 0
    assert 0 <= dR[0] <= 1


def test_regularise_det_values():
    R, dR = regularise_det(np.array([0.0, 1e6, -10.0]), 1e-4)
    assert pytest.approx(1e-4) == R[0]
    assert pytest.approx(0.5) == dR[0]
    assert pytest.approx(1e6) == R[1]
    assert 0 < R[2] < 1e-4


def _scalar(func, derivative):
    def evaluate(x, jacobian=True):
        return np.array([func(x[0])]), sparse.csr_matrix([[derivative(x[0])]]) if jacobian else None
    return evaluate


def test_newton_scalar():
    result = newton_driver(_scalar(lambda x: x ** 2 - 4, lambda x: 2 * x), np.array([3.0]), SolverConfig())
    assert pytest.approx(2.0, abs=1e-12) == result.state[0]
    assert result.iterations <= 8


def test_newton_linear_one_step():
    A = sparse.csr_matrix([[4.0, 1.0], [1.0, 3.0]])
    b = np.array([1.0, 2.0])
    evaluator = lambda x, jacobian=True: (A @ x - b, A)  # noqa: E731
    result = newton_driver(evaluator, np.zeros(2), SolverConfig())
    assert result.iterations == 1
    assert np.allclose(A @ result.state, b)

    result = fixed_point_driver(evaluator, np.zeros(2), SolverConfig())
    assert result.iterations == 1


def test_newton_fixed_unknowns():
    A = sparse.csr_matrix([[2.0, -1.0], [-1.0, 2.0]])
    evaluator = lambda x, jacobian=True: (A @ x, A)  # noqa: E731
    fixed = np.array([True, False])
    result = newton_driver(evaluator, np.array([1.0, 0.0]), SolverConfig(), fixed)
    assert np.allclose(result.state, [1.0, 0.5])


def test_newton_line_search():
    # the full Newton step for arctan overshoots from x = 2
    result = newton_driver(_scalar(np.arctan, lambda x: 1 / (1 + x ** 2)), np.array([2.0]), SolverConfig())
    assert result.trace[0]["step"] < 1.0
    assert pytest.approx(0.0, abs=1e-10) == result.state[0]


def test_newton_no_convergence():
    with pytest.raises(ConvergenceError) as e:
        newton_driver(_scalar(np.arctan, lambda x: 1 / (1 + x ** 2)), np.array([2.0]), SolverConfig(max_iter=1))
    assert len(e.value.trace) == 1


def test_forward_laplace_identity():
    q, F = unit_square()
    space = MultipatchSpace.from_degree(q, 3, refine=1)
    m = forward_laplace(space, F)
    assert np.abs(m.coeffs - GeometryMap.identity(space).coeffs).max() < 1e-10


def test_forward_laplace_affine():
    q, F = unit_square()
    A, b = np.array([[1.5, 0.3], [-0.2, 1.1]]), np.array([0.4, -1.0])
    space = MultipatchSpace.from_degree(q, 2, refine=2)
    m = forward_laplace(space, F.transformed(A, b))
    assert np.abs(m.coeffs - (GeometryMap.identity(space).coeffs @ A.T + b)).max() < 1e-10


def test_forward_laplace_lbend_folds():
    q, F = lbend()
    space = MultipatchSpace.from_degree(q, 3, refine=2)
    report = quality_report(forward_laplace(space, F))
    assert report.detj_min < 0
    assert report.negative_point_count > 0


def test_weak_form_identity():
    q, F = unit_square()
    space = MultipatchSpace.from_degree(q, 3, refine=1)
    x0 = GeometryMap.identity(space)
    x = solve_weak_form(space, x0, SolverConfig(scheme="weakform", eps_continuation=False))
    assert x.provenance["iterations"] <= 2
    assert np.abs(x.coeffs - x0.coeffs).max() < 1e-10


@pytest.mark.parametrize("amplitude", [0.0, 0.01, 0.03])
def test_weak_form_jacobian(amplitude):
    q, F = conformal(2)
    space = MultipatchSpace.from_degree(q, 2)
    layout = geometry_layout(space)
    cache = EvalCache.build(space)
    state = forward_laplace(space, F).state
    state = state + amplitude * np.random.default_rng(8).normal(size=state.shape)
    assert fd_jacobian_check(weak_form_evaluator(layout, cache, 1e-4), state) < 1e-5


@pytest.mark.slow
def test_weak_form_lbend_bijective():
    q, F = lbend()
    space = MultipatchSpace.from_degree(q, 3, refine=2)
    x = parameterise(space, F, SolverConfig(scheme="weakform"))
    assert bijectivity_report(x).negative_count == 0


def test_winslow_terms_barrier():
    with pytest.raises(BarrierError):
        winslow_terms(np.array([[[1.0, 0.0], [0.0, -1.0]]]))


def test_winslow_value():
    q, F = unit_square()
    space = MultipatchSpace.from_degree(q, 2)
    m = GeometryMap.identity(space)
    assert pytest.approx(2.0, abs=1e-12) == winslow_value(m)
    assert pytest.approx(2.5, abs=1e-12) == winslow_value(m.with_coeffs(m.coeffs * [2.0, 1.0]))


def test_winslow_identity_is_stationary():
    q, F = unit_square()
    space = MultipatchSpace.from_degree(q, 2, refine=1)
    x0 = GeometryMap.identity(space)
    x = minimise_winslow(space, x0)
    assert x.provenance["iterations"] == 0
    assert pytest.approx(2.0) == x.provenance["objective"]


def test_winslow_needs_bijective_start():
    q, F = lbend()
    space = MultipatchSpace.from_degree(q, 3, refine=2)
    with pytest.raises(BarrierError):
        minimise_winslow(space, forward_laplace(space, F))


@pytest.mark.slow
@pytest.mark.parametrize("refine", [1, 2])
def test_winslow_not_above_weak_form(refine):
    q, F = quarter_annulus()
    space = MultipatchSpace.from_degree(q, 2, refine)
    cfg = SolverConfig(scheme="weakform")
    x = solve_weak_form(space, forward_laplace(space, F), cfg)
    w = minimise_winslow(space, x, SolverConfig(scheme="winslow"))
    assert w.provenance["objective"] <= winslow_value(x) + 1e-8
    trace = w.provenance["objective_trace"]
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))
    assert bijectivity_report(w).min_det > 0
    assert math.isfinite(w.provenance["objective"])
