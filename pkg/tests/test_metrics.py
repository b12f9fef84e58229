import math

import numpy as np
import pytest

from harmap.errors import InputError
from harmap.maps import GeometryMap, identity_coefficients
from harmap.metrics import (
    EXACT_RECOVERY,
    area_multipatch,
    bijectivity_report,
    boundary_orthogonality,
    convergence_rate,
    corner_point,
    detj_ratio,
    h1_distance,
    interface_jump,
    metric_eigenvalue_at_vertex,
    quality_report,
    ratio_report,
    refinement_rate,
    vertex_limits,
    winslow,
)
from harmap.parameterise import parameterise
from harmap.samples import LBEND_CONCAVE_VERTEX, lbend, two_patch_topology
from harmap.solvers import SolverConfig
from harmap.topology import MultipatchSpace


def _scaled(m, A):
    return m.with_coeffs(m.coeffs @ np.asarray(A).T)


def _kinked(space, a):
    coeffs = identity_coefficients(space)
    coeffs[:, 1] += a * np.maximum(coeffs[:, 0] - 0.5, 0.0)
    return GeometryMap(space, coeffs)


def test_identity_metrics(identity_map):
    x = identity_map("square")
    value, degenerate = winslow(x)
    assert not degenerate
    assert pytest.approx(value, abs=1e-10) == 2.0
    assert pytest.approx(area_multipatch(x), abs=1e-10) == 1.0
    assert pytest.approx(boundary_orthogonality(x), abs=1e-10) == 0.0

    report = quality_report(x)
    assert pytest.approx(report.detj_min, abs=1e-10) == 1.0
    assert pytest.approx(report.detj_max, abs=1e-10) == 1.0
    assert report.negative_point_count == 0
    assert report.interface_jump == 0.0


def test_identity_two_patch(identity_map):
    x = identity_map("two-patch")
    assert pytest.approx(interface_jump(x), abs=1e-10) == 0.0
    assert pytest.approx(winslow(x)[0], abs=1e-10) == 2.0
    # each patch covers half the square, so det d_mu x is a half
    assert pytest.approx(area_multipatch(x), abs=1e-10) == 0.5


def test_stretched(identity_map):
    x = _scaled(identity_map("square"), np.diag([2.0, 1.0]))
    assert pytest.approx(winslow(x)[0], abs=1e-10) == 2.5
    assert pytest.approx(area_multipatch(x), abs=1e-10) == 4.0
    assert pytest.approx(detj_ratio(x), abs=1e-10) == 1.0


def test_winslow_degenerate(identity_map):
    x = _scaled(identity_map("square"), np.diag([1.0, -1.0]))
    value, degenerate = winslow(x)
    assert degenerate
    assert value == math.inf
    assert quality_report(x).winslow_degenerate
    assert detj_ratio(x) == math.inf


@pytest.mark.parametrize("a", [0.1, 0.5, 1.0, 2.0])
def test_interface_jump_kink(a):
    space = MultipatchSpace.from_degree(two_patch_topology(), 1, 0)
    x = _kinked(space, a)
    expected = math.sqrt(2 - 2 / math.sqrt(1 + a ** 2))
    assert pytest.approx(interface_jump(x), abs=1e-10) == expected


def test_boundary_orthogonality_shear(identity_map):
    x = _scaled(identity_map("square"), [[1.0, 1.0], [0.0, 1.0]])
    # tangential and transverse derivatives meet at 45 degrees on every side
    assert pytest.approx(boundary_orthogonality(x), abs=1e-10) == math.sqrt(4 * 0.5)


def test_corner_point():
    assert np.allclose(corner_point(0, 0.1), [[0.1, 0.1]])
    assert np.allclose(corner_point(2, 0.1), [[0.9, 0.9]])
    assert np.allclose(corner_point(3, 0.1), [[0.1, 0.9]])


def test_vertex_limits(identity_map):
    x = identity_map("four-patch")
    limits = vertex_limits(x)
    assert sorted(limits) == list(range(9))
    assert len(limits[8]) == 4
    assert len(limits[0]) == 1
    assert all(v > 0 for values in limits.values() for v in values)

    relative = vertex_limits(x, reference=x)
    assert all(pytest.approx(v) == 1.0 for values in relative.values() for v in values)


def test_metric_eigenvalue(identity_map):
    x = identity_map("four-patch")
    assert pytest.approx(metric_eigenvalue_at_vertex(x, 8), abs=1e-8) == 1.0
    with pytest.raises(InputError):
        metric_eigenvalue_at_vertex(x, 42)


def test_bijectivity(identity_map):
    x = identity_map("square", degree=2, refine=1)
    report = bijectivity_report(x)
    assert report.dense_order == 7
    assert report.negative_count == 0
    assert pytest.approx(report.min_det) == 1.0
    assert report.sample_count == 4 * 49
    assert report.as_dict()["argmin"]["patch"] == 0

    with pytest.raises(InputError):
        bijectivity_report(x, dense_order=3)


def test_bijectivity_fold(identity_map):
    x = identity_map("square", degree=2, refine=1)
    coeffs = x.coeffs.copy()
    coeffs[5] = [0.9, 0.9]
    report = bijectivity_report(x.with_coeffs(coeffs))
    assert report.negative_count > 0
    assert report.min_det < 0


@pytest.mark.parametrize("e1,e2,rate", [(4.0, 2.0, 1.0), (8.0, 2.0, 2.0), (1.0, 1.0, 0.0)])
def test_convergence_rate(e1, e2, rate):
    assert pytest.approx(convergence_rate(e1, e2)) == rate


def test_convergence_rate_edge_cases():
    assert convergence_rate(1e-3, 0.0) == EXACT_RECOVERY
    with pytest.raises(InputError):
        convergence_rate(-1.0, 1.0)
    with pytest.raises(InputError):
        convergence_rate(0.0, 1.0)


def test_h1_distance(identity_map):
    x = identity_map("square", degree=2, refine=1)
    shifted = x.with_coeffs(x.coeffs + [0.3, 0.4])
    assert pytest.approx(h1_distance(x, shifted), abs=1e-10) == 0.5

    fine = identity_map("square", degree=2, refine=3)
    assert pytest.approx(h1_distance(x, fine), abs=1e-10) == 0.0


def test_h1_distance_non_nested(identity_map):
    with pytest.raises(InputError):
        h1_distance(identity_map("square"), identity_map("two-patch"))


def test_refinement_rate(identity_map):
    with pytest.raises(InputError):
        refinement_rate([identity_map("square")] * 2)
    coarse, fine = identity_map("square", refine=0), identity_map("square", refine=1)
    assert refinement_rate([coarse.with_coeffs(coarse.coeffs + 0.1), fine, fine]) == EXACT_RECOVERY


def test_ratio_report(identity_map):
    x = identity_map("square")
    ratios = ratio_report(x, _scaled(x, np.diag([2.0, 1.0])))
    assert pytest.approx(ratios.nu_area) == 4.0
    assert math.isnan(ratios.nu_gamma)
    assert pytest.approx(ratios.nu_detj) == 1.0
    assert set(ratios.as_dict()) >= {"nu_area", "nu_gamma", "nu_perp", "nu_detj", "nu_detj_reference"}


@pytest.mark.slow
def test_concave_vertex_degenerates():
    q, F = lbend()
    cfg = SolverConfig(scheme="winslow")
    eigenvalues = []
    for refine in range(1, 5):
        x = parameterise(MultipatchSpace.from_degree(q, 3, refine), F, cfg)
        eigenvalues.append(metric_eigenvalue_at_vertex(x, LBEND_CONCAVE_VERTEX))
    ratios = [b / a for a, b in zip(eigenvalues, eigenvalues[1:])]
    assert all(0.4 < ratio < 0.9 for ratio in ratios)

