import numpy as np
import pytest

from harmap.constants import OrthVariant, ReparamMode, Scheme, TargetDomain
from harmap.errors import InputError
from harmap.maps import GeometryMap, identity_coefficients
from harmap.metrics import ratio_report, refinement_rate
from harmap.parameterise import (
    ReparamOptions,
    parameterise,
    reference_controlmap,
    reference_geometry,
    reparameterise,
)
from harmap.samples import quarter_annulus
from harmap.solvers import SolverConfig
from harmap.topology import MultipatchSpace

SHEAR = np.array([[1.0, 0.5], [0.0, 1.0]])


def _config(scheme):
    linearisation = "fixed-point" if Scheme(scheme) == Scheme.rotfree else "newton"
    return SolverConfig(scheme=scheme, linearisation=linearisation)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_identity_recovered(make_space, scheme):
    space, F = make_space("square", degree=2, refine=2)
    x = parameterise(space, F, _config(scheme))
    assert np.allclose(x.coeffs, identity_coefficients(space), atol=1e-7)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_affine_recovered(make_space, scheme):
    space, F = make_space("sheared", degree=2, refine=1)
    x = parameterise(space, F, _config(scheme))
    assert np.allclose(x.coeffs, identity_coefficients(space) @ SHEAR.T, atol=1e-7)


def test_warm_start(make_space):
    space, F = make_space("sheared", degree=2, refine=1)
    exact = GeometryMap(space, identity_coefficients(space) @ SHEAR.T)
    x = parameterise(space, F, SolverConfig(scheme="weakform", eps_continuation=False), initial=exact)
    assert np.allclose(x.coeffs, exact.coeffs, atol=1e-8)


def test_reparam_options():
    options = ReparamOptions(variant="q")
    assert options.variant == OrthVariant.q
    assert options.as_dict()["variant"] == "q"
    assert options.as_dict()["layer_ratio"] == 72.0

    with pytest.raises(InputError):
        ReparamOptions(kappa=0.0)

    with pytest.raises(InputError):
        ReparamOptions(layer_ratio=-1.0)

    with pytest.raises(InputError):
        ReparamOptions(orth_iterations=0)

    with pytest.raises(ValueError):
        ReparamOptions(variant="s")


def test_reference_controlmap(make_space):
    space, _ = make_space("square")
    r = reference_controlmap(space)
    assert r.target == TargetDomain.polygon
    assert r.provenance["source"] == "identity"
    assert np.allclose(r.coeffs, identity_coefficients(space))

    space, _ = make_space("disc")
    r = reference_controlmap(space)
    assert r.target == TargetDomain.unit_disc
    assert r.provenance["source"] == "disc-reference"


def test_adapt_keeps_reference_controlmap(make_space):
    space, F = make_space("square", degree=2, refine=1)
    x_ref = GeometryMap.identity(space)
    x, r = reparameterise(ReparamMode.adapt, space, F, x_ref, options=ReparamOptions(nu1=0.0, nu2=1.0))
    assert r.provenance["source"] == "identity"
    assert np.allclose(x.coeffs, x_ref.coeffs, atol=1e-7)


def test_interface_removal_on_square(make_space):
    """A single patch has no interfaces, so the controlmap stays the identity"""
    space, F = make_space("square", degree=2, refine=1)
    x_ref = GeometryMap.identity(space)
    x, s = reparameterise(ReparamMode.interface_removal, space, F, x_ref)
    assert np.allclose(s.coeffs, identity_coefficients(space), atol=1e-8)
    assert np.allclose(x.coeffs, x_ref.coeffs, atol=1e-7)


@pytest.mark.slow
@pytest.mark.parametrize("mode", [ReparamMode.homogenise_sigma, ReparamMode.homogenise_omega])
def test_homogenisation_monotone_in_k(make_space, mode):
    space, F = make_space("skew", degree=3, refine=2)
    cfg = SolverConfig(scheme="weakform")
    x_ref = reference_geometry(space, F, reference_controlmap(space), cfg)
    reports = []
    for k in (0.0, 1.0, 2.0):
        x, s = reparameterise(mode, space, F, x_ref, cfg, ReparamOptions(k=k))
        assert s.provenance["scheme"] == "coupled"
        assert s.min_det() > 0
        reports.append(ratio_report(x_ref, x))
    areas = [r.nu_area for r in reports]
    assert areas[0] == pytest.approx(1.0, abs=1e-3)
    assert all(b <= a + 1e-6 for a, b in zip(areas, areas[1:]))
    assert areas[1] < 1
    assert reports[2].nu_detj <= 0.5 * reports[0].nu_detj


@pytest.mark.slow
def test_annulus_refinement_rate():
    q, F = quarter_annulus()
    cfg = SolverConfig(scheme="c0dg")
    maps = []
    for refine in range(1, 5):
        space = MultipatchSpace.from_degree(q, 2, refine)
        maps.append(parameterise(space, F, cfg, initial=maps[-1].prolong(space) if maps else None))
    assert refinement_rate(maps) >= 1.3
