import math

import numpy as np
import pytest

from harmap import config
from harmap.assembly import EvalCache
from harmap.constants import Edge, OrthVariant, ReparamMode, TargetDomain
from harmap.control import (
    BoundaryFrame,
    ControlMap,
    boundary_frames,
    boundary_function,
    boundary_layer_orthogonal,
    boundary_orth_controlmap,
    check_monotone,
    compose_boundary_functions,
    coons_patch,
    disc_reference_controlmap,
    evaluate_boundary_function,
    hermite_blend,
    layer_corrected_derivatives,
    layer_profile,
    layer_slope,
    layer_slope_derivative,
    monotone_fit,
    solve_control_diffusion,
    solve_coupled,
    transverse_derivatives,
    update_orth_controlmap,
)
from harmap.diffusivity import Identity, InterfaceRemoval, regularise_vertex
from harmap.errors import CompatibilityError, GeometryError, InputError, TopologyError
from harmap.maps import GeometryMap, identity_coefficients
from harmap.metrics import ratio_report, vertex_limits
from harmap.parameterise import ReparamOptions, reference_controlmap, reference_geometry, reparameterise
from harmap.samples import framed_square_topology, six_patch, unit_square
from harmap.solvers import SolverConfig
from harmap.splines import SplineCurve, TensorBasis, basis_matrix, make_open_knot_vector
from harmap.topology import MultipatchSpace, edge_point


P00, P10, P11, P01 = (0.0, 0.0), (2.0, 0.0), (2.0, 1.5), (0.0, 1.0)


def _line(a, b, degree=1):
    a, b = np.asarray(a), np.asarray(b)
    t = np.linspace(0.0, 1.0, degree + 1)[:, None]
    return SplineCurve(make_open_knot_vector(degree), tuple(map(tuple, (1 - t) * a + t * b)))


def _bilinear(mu):
    u, v = mu[:, :1], mu[:, 1:]
    return (
        (1 - u) * (1 - v) * np.asarray(P00) + u * (1 - v) * np.asarray(P10)
        + u * v * np.asarray(P11) + (1 - u) * v * np.asarray(P01)
    )


def test_identity_diffusion(make_space):
    space, _ = make_space("four-patch")
    s = solve_control_diffusion(space, Identity())
    assert s.identity_boundary
    assert np.allclose(s.coeffs, identity_coefficients(space), atol=1e-10)
    s.check_boundary()
    assert s.min_det() > 0


def test_check_boundary(make_space):
    space, _ = make_space("square")
    s = ControlMap.identity(space)
    s.coeffs[space.boundary_dofs[0]] += 1e-3
    with pytest.raises(GeometryError):
        s.check_boundary()

    s.identity_boundary = False
    s.check_boundary()


def test_coupled_identity(make_space):
    space, _ = make_space("square")
    x, s = solve_coupled(space, Identity(), Identity(), (GeometryMap.identity(space), ControlMap.identity(space)))
    assert np.allclose(x.coeffs, identity_coefficients(space), atol=1e-8)
    assert np.allclose(s.coeffs, identity_coefficients(space), atol=1e-8)
    assert s.provenance["scheme"] == "coupled"


def test_coupled_degenerate_reference(make_space):
    space, _ = make_space("square")
    flat = GeometryMap(space, np.zeros((space.dimension, 2)))
    with pytest.raises(GeometryError):
        solve_coupled(space, Identity(), Identity(), (flat, ControlMap.identity(space)))


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_coons_patch_bilinear(degree):
    curves = [_line(P00, P10, degree), _line(P10, P11, degree), _line(P01, P11, degree), _line(P00, P01, degree)]
    basis = TensorBasis(make_open_knot_vector(degree, [0.5]), make_open_knot_vector(degree, [0.5]))
    C = coons_patch(*curves, basis=basis)
    assert C.shape == (basis.dimension, 2)

    mu = np.random.rand(20, 2)
    assert np.allclose(basis.evaluate(mu) @ C, _bilinear(mu))


def test_coons_patch_corner_mismatch():
    curves = [_line(P00, P10), _line(P10, P11), _line(P01, P11), _line((0.0, 0.1), P01)]
    with pytest.raises(InputError):
        coons_patch(*curves)


def test_boundary_frames():
    frames = boundary_frames(framed_square_topology())
    assert sorted(fr.patch for fr in frames) == [1, 2, 3, 4]
    assert all(fr.edge == Edge.south for fr in frames)


def test_boundary_frames_corner_patch():
    q, _ = unit_square()
    with pytest.raises(TopologyError):
        boundary_frames(q)


@pytest.mark.parametrize("edge", list(Edge))
def test_boundary_frame(edge):
    frame = BoundaryFrame(0, edge)
    mu = np.random.rand(10, 2)
    assert np.allclose(frame.from_frame(frame.to_frame(mu)), mu)
    assert np.linalg.det(frame.R) == pytest.approx(1.0)

    # the boundary edge lands on nu = 1
    axis = 1 if edge in (Edge.south, Edge.north) else 0
    value = 0.0 if edge in (Edge.south, Edge.west) else 1.0
    on_edge = np.random.rand(10, 2)
    on_edge[:, axis] = value
    assert np.allclose(frame.to_frame(on_edge)[:, 1], 1.0)


def test_boundary_function():
    space = MultipatchSpace.from_degree(framed_square_topology(), 2, 1)
    x_ref = GeometryMap.identity(space)
    for frame in boundary_frames(space.quadrangulation):
        q_fn = boundary_function(x_ref, frame)
        ends = evaluate_boundary_function(q_fn, np.array([0.0, 1.0]))
        assert np.allclose(ends, [0.0, 1.0], atol=1e-10)
        check_monotone(q_fn, frame.patch)


@pytest.mark.parametrize("levels", [0, 2])
def test_boundary_function_corner_slope(levels):
    # the exact trace is flat at the domain corners, the fit keeps a positive slope there
    space = MultipatchSpace.from_degree(framed_square_topology(), 3, 1)
    x_ref = GeometryMap.identity(space)
    for frame in boundary_frames(space.quadrangulation):
        q_fn = boundary_function(x_ref, frame, levels=levels)
        slope = evaluate_boundary_function(q_fn, np.linspace(0.0, 1.0, 201), deriv=1)
        assert slope.min() >= config.ORTH_MIN_SLOPE - 1e-10
        check_monotone(q_fn, frame.patch)


def test_monotone_fit():
    kv = make_open_knot_vector(3, [0.25, 0.5, 0.75])
    t = np.linspace(0.0, 1.0, 101)
    assert np.allclose(monotone_fit(kv, t, t), kv.greville)

    coeffs = monotone_fit(kv, t, t + 0.3 * np.sin(2 * np.pi * t), min_slope=0.05)
    assert coeffs[0] == 0.0
    assert coeffs[-1] == 1.0
    assert (basis_matrix(kv, t, 1) @ coeffs).min() >= 0.05 - 1e-10

    with pytest.raises(InputError):
        monotone_fit(kv, t, t, min_slope=1.0)


def test_compose_boundary_functions():
    kv = make_open_knot_vector(3, [0.5])
    t = np.linspace(0.0, 1.0, 51)
    inner = (kv, monotone_fit(kv, t, t ** 2))
    identity = (kv, kv.greville)
    kv_c, coeffs = compose_boundary_functions(identity, inner)
    assert kv_c is kv
    assert np.allclose(coeffs, inner[1], atol=1e-8)


def test_check_monotone():
    kv = make_open_knot_vector(2)
    with pytest.raises(GeometryError):
        check_monotone((kv, np.array([0.0, 2.0, 1.0])), 0)
    # roundoff below the tolerance passes
    check_monotone((make_open_knot_vector(2, [0.5]), np.array([0.0, 0.5, 0.5 - 1e-12, 1.0])), 0)



def test_hermite_blend():
    tau = np.linspace(0.0, 1.0, 5)
    q = tau ** 2
    assert np.allclose(hermite_blend(tau, np.zeros(5), q), tau)
    assert np.allclose(hermite_blend(tau, np.ones(5), q), q)


def test_layer_profile():
    nu = np.linspace(0.0, 1.0, 11)
    assert np.allclose(layer_profile(0.0, nu), nu)
    assert np.allclose(layer_profile(1e-14, nu), nu)
    profile = layer_profile(5.0, nu)
    assert profile[0] == pytest.approx(0.0)
    assert profile[-1] == pytest.approx(1.0)
    assert np.all(np.diff(profile) > 0)


def test_layer_slope():
    assert pytest.approx(float(layer_slope(10.0)), rel=1e-6) == 10 / math.expm1(10)
    assert pytest.approx(float(layer_slope(10.0)), abs=1e-6) == 0.000454
    assert float(layer_slope(0.0)) == pytest.approx(1.0)
    assert float(layer_slope(1e-7)) == pytest.approx(1.0)


@pytest.mark.parametrize("d", [1e-5, 0.3, 2.0, 15.0])
def test_layer_slope_derivative(d):
    h = 1e-6
    fd = (layer_slope(d + h) - layer_slope(d - h)) / (2 * h)
    assert pytest.approx(float(layer_slope_derivative(d)), abs=1e-6) == float(fd)


def test_orth_t_variant_degree(make_space):
    space, _ = make_space("sheared", degree=2)
    with pytest.raises(InputError):
        boundary_orth_controlmap(GeometryMap.identity(space), OrthVariant.t)


def test_orth_controlmap():
    space = MultipatchSpace.from_degree(framed_square_topology(), 3, 1)
    x_ref = GeometryMap.identity(space)
    for variant in OrthVariant:
        s = boundary_orth_controlmap(x_ref, variant)
        assert not s.identity_boundary
        assert s.provenance["variant"] == variant.value
        assert sorted(s.boundary_functions) == [1, 2, 3, 4]
        assert s.min_det() > 0


def test_update_orth_controlmap():
    space = MultipatchSpace.from_degree(framed_square_topology(), 3, 1)
    x_ref = GeometryMap.identity(space)
    s = boundary_orth_controlmap(x_ref, OrthVariant.q)
    updated = update_orth_controlmap(x_ref, s)
    assert updated.provenance["iteration"] == 1
    assert updated.provenance["variant"] == OrthVariant.q.value
    assert updated.min_det() > 0
    for patch, q_fn in updated.boundary_functions.items():
        check_monotone(q_fn, patch)

    with pytest.raises(InputError):
        update_orth_controlmap(x_ref, reference_controlmap(space))



def test_layer_requires_q_variant():
    space = MultipatchSpace.from_degree(framed_square_topology(), 3, 1)
    x_ref = GeometryMap.identity(space)
    s_t = boundary_orth_controlmap(x_ref, OrthVariant.t)
    with pytest.raises(InputError):
        boundary_layer_orthogonal(x_ref, s_t, 0.5)

    s_q = boundary_orth_controlmap(x_ref, OrthVariant.q)
    with pytest.raises(InputError):
        boundary_layer_orthogonal(x_ref, s_q, 0.0)
    with pytest.raises(CompatibilityError):
        boundary_layer_orthogonal(x_ref, s_q, 0.5, b=np.ones(3))
    with pytest.raises(InputError):
        layer_corrected_derivatives(x_ref, s_q)


def test_layer_corrected_derivatives():
    space = MultipatchSpace.from_degree(framed_square_topology(), 3, 1)
    x_ref = GeometryMap.identity(space)
    s_q = boundary_orth_controlmap(x_ref, OrthVariant.q)
    s = boundary_layer_orthogonal(x_ref, s_q, 0.2)
    assert len(s.provenance["steepness"]) == len(space.boundary_dofs)
    b = layer_corrected_derivatives(x_ref, s)
    cache = EvalCache.build(space)
    assert b.shape == (len(cache.boundary),)
    # the measured derivatives divided by slopes below one
    assert np.all(b >= transverse_derivatives(x_ref, boundary_frames(space.quadrangulation), cache) - 1e-12)



def test_disc_reference(make_space):
    space, _ = make_space("disc")
    r = disc_reference_controlmap(space)
    assert r.target == TargetDomain.unit_disc
    assert r.min_det() > 0

    q = space.quadrangulation
    for patch, edge in q.boundary_edges:
        points = r.evaluate_mu(patch, edge_point(edge, np.linspace(0.0, 1.0, 7)))
        assert np.allclose(np.linalg.norm(points, axis=1), 1.0, atol=5e-3)


@pytest.mark.slow
def test_interface_removal_reduces_jumps(make_space):
    space, F = make_space("four-patch", degree=3, refine=2)
    cfg = SolverConfig(scheme="weakform")
    x_ref = reference_geometry(space, F, reference_controlmap(space), cfg)
    x, s = reparameterise(ReparamMode.interface_removal, space, F, x_ref, cfg, ReparamOptions(kappa=9.0))
    assert s.min_det() > 0
    assert ratio_report(x_ref, x).nu_gamma <= 0.5


@pytest.mark.slow
def test_vertex_blend_settles_under_refinement():
    q, _ = six_patch()
    plain, blended = [], []
    for refine in (3, 4, 5):
        space = MultipatchSpace.from_degree(q, 3, refine)
        r = reference_controlmap(space)
        d = InterfaceRemoval(r, normalised=True)
        for values, diffusivity in ((plain, d), (blended, regularise_vertex(d, 9.0, q, reference=r, space=space))):
            s = solve_control_diffusion(space, diffusivity, reference=r)
            values.append(max(v for limits in vertex_limits(s, r).values() for v in limits))
    assert all(b > a for a, b in zip(plain, plain[1:]))
    assert abs(blended[2] - blended[1]) < 0.15 * blended[1]



@pytest.mark.slow
@pytest.mark.parametrize("variant", list(OrthVariant))
def test_boundary_orth_sheared(make_space, variant):
    space, F = make_space("sheared", degree=3, refine=2)
    cfg = SolverConfig(scheme="weakform")
    x_ref = reference_geometry(space, F, reference_controlmap(space), cfg)
    x, s = reparameterise(ReparamMode.boundary_orth, space, F, x_ref, cfg, ReparamOptions(variant=variant))
    assert s.provenance["iteration"] == 2
    assert ratio_report(x_ref, x).nu_perp <= 0.3


@pytest.mark.slow
def test_boundary_layer_orth_sheared(make_space):
    space, F = make_space("sheared", degree=3, refine=2)
    cfg = SolverConfig(scheme="weakform")
    x_ref = reference_geometry(space, F, reference_controlmap(space), cfg)
    x, s = reparameterise(ReparamMode.boundary_layer_orth, space, F, x_ref, cfg)
    k = s.provenance["k_target"]
    assert s.provenance["source"] == "boundary-layer-orth"

    b = transverse_derivatives(x, boundary_frames(space.quadrangulation), EvalCache.build(space))
    assert np.mean(np.abs(b - k) <= 0.25 * k) >= 0.9
    assert ratio_report(x_ref, x).nu_perp < 1

