"""Scheme dispatch and the reparameterisation recipes chaining controlmaps, diffusivities and solvers"""
from dataclasses import asdict, dataclass
import logging
from typing import Any, Dict, Optional, Tuple

from . import config
from .constants import OrthVariant, ReparamMode, Scheme, TargetDomain
from .control import (
    ControlMap,
    boundary_layer_orthogonal,
    boundary_orth_controlmap,
    disc_reference_controlmap,
    layer_corrected_derivatives,
    mean_transverse_derivative,
    solve_control_diffusion,
    solve_coupled,
    update_orth_controlmap,
)
from .diffusivity import (
    BoundaryLayer,
    Diffusivity,
    HomogenisationOmega,
    HomogenisationSigma,
    Identity,
    InterfaceRemoval,
    ScalarMonitor,
    monitor_from_name,
    regularise_vertex,
)
from .errors import InputError
from .maps import GeometryMap
from .ndf import solve_c0dg, solve_hessian_recovery, solve_rotation_free
from .solvers import SolverConfig, forward_laplace, minimise_winslow, solve_weak_form
from .topology import BoundaryCorrespondence, MultipatchSpace

logger = logging.getLogger(__name__)
logger.setLevel(config.LOG_LEVEL)


def parameterise(
    space: MultipatchSpace,
    F: BoundaryCorrespondence,
    cfg: Optional[SolverConfig] = None,
    initial: Optional[GeometryMap] = None,
) -> GeometryMap:
    """
    Solve with the configured scheme.  The weak form starts from the C0-DG solution and Winslow minimisation from
    the weak-form solution unless ``initial`` is given.
    """
    cfg = cfg or SolverConfig()
    if cfg.scheme == Scheme.c0dg:
        return solve_c0dg(space, F, cfg, initial=initial)
    if cfg.scheme == Scheme.hessian:
        return solve_hessian_recovery(space, F, cfg, initial=initial).geometry
    if cfg.scheme == Scheme.rotfree:
        return solve_rotation_free(space, F, cfg, initial=initial).geometry
    if initial is None and space.degree >= 2:
        initial = solve_c0dg(space, F, SolverConfig(**{**cfg.as_dict(), "scheme": Scheme.c0dg}))
    elif initial is None:
        initial = forward_laplace(space, F, cfg)
    x = solve_weak_form(space, initial, cfg)
    if cfg.scheme == Scheme.weakform:
        return x
    return minimise_winslow(space, x, cfg)


@dataclass
class ReparamOptions:
    """Parameters of the reparameterisation recipes, unused ones are ignored by each mode"""
    k: float = 1.0
    normalised: bool = True
    kappa: Optional[float] = None
    monitor: str = "ring"
    nu1: float = 1.0
    nu2: float = 0.01
    gradient: bool = False
    layer_mu: float = 30.0
    layer_k: float = 2.0
    layer_nu: float = 0.005
    variant: OrthVariant = OrthVariant.t
    k_target: Optional[float] = None
    layer_ratio: float = 72.0
    orth_iterations: int = 3
    layer_iterations: int = 3

    def __post_init__(self):
        self.variant = OrthVariant(self.variant)
        if self.kappa is not None and not self.kappa > 0:
            raise InputError(f"kappa must be positive, got {self.kappa}")
        if not self.layer_ratio > 0:
            raise InputError(f"layer_ratio must be positive, got {self.layer_ratio}")
        if self.orth_iterations < 1 or self.layer_iterations < 1:
            raise InputError(
                f"Iteration counts must be positive, got {self.orth_iterations} and {self.layer_iterations}"
            )

    def as_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["variant"] = self.variant.value
        return out


def reference_controlmap(space: MultipatchSpace) -> ControlMap:
    """Identity for polygonal controlmap domains, the Coons-filled disc map for unit disc targets"""
    if space.quadrangulation.target == TargetDomain.unit_disc:
        return disc_reference_controlmap(space)
    return ControlMap.identity(space)


def reference_geometry(
    space: MultipatchSpace,
    F: BoundaryCorrespondence,
    r: ControlMap,
    cfg: Optional[SolverConfig] = None,
) -> GeometryMap:
    """Weak-form solution under the reference controlmap, the starting point of every recipe"""
    cfg = cfg or SolverConfig(scheme=Scheme.weakform)
    x = parameterise(space, F, SolverConfig(**{**cfg.as_dict(), "scheme": Scheme.weakform}))
    if r.target == TargetDomain.unit_disc:
        x = solve_weak_form(space, x, cfg, controlmap=r)
    return x


def _vertex_regularised(d: Diffusivity, options: ReparamOptions, space: MultipatchSpace, r: ControlMap, x=None):
    if options.kappa is None:
        return d
    return regularise_vertex(d, options.kappa, space.quadrangulation, geometry=x, reference=r, space=space)


def _controlmap_arg(r: ControlMap) -> Optional[ControlMap]:
    return None if r.target == TargetDomain.polygon and r.provenance.get("source") == "identity" else r


def reparameterise(
    mode: ReparamMode,
    space: MultipatchSpace,
    F: BoundaryCorrespondence,
    x_ref: Optional[GeometryMap] = None,
    cfg: Optional[SolverConfig] = None,
    options: Optional[ReparamOptions] = None,
) -> Tuple[GeometryMap, ControlMap]:
    """Run one reparameterisation recipe, returning the recomputed geometry and its controlmap"""
    mode = ReparamMode(mode)
    cfg = cfg or SolverConfig(scheme=Scheme.weakform)
    options = options or ReparamOptions()
    r = reference_controlmap(space)
    x_ref = x_ref if x_ref is not None else reference_geometry(space, F, r, cfg)
    logger.info(f"Reparameterisation {mode.value} on {space.dimension} basis functions")

    if mode == ReparamMode.interface_removal:
        controlmap = _controlmap_arg(r)
        d = InterfaceRemoval(controlmap, normalised=options.normalised)
        d = _vertex_regularised(d, options, space, controlmap)
        s = solve_control_diffusion(space, d, cfg=cfg, reference=controlmap)
        return solve_weak_form(space, x_ref, cfg, controlmap=s), s

    if mode == ReparamMode.homogenise_sigma:
        d = _vertex_regularised(HomogenisationSigma(options.k), options, space, r, x_ref)
        return solve_coupled(space, Identity(), d, (x_ref, r), cfg)

    if mode == ReparamMode.homogenise_omega:
        d = _vertex_regularised(HomogenisationOmega(options.k), options, space, r, x_ref)
        return solve_coupled(space, d, Identity(), (x_ref, r), cfg)

    if mode == ReparamMode.adapt:
        d = ScalarMonitor(monitor_from_name(options.monitor), options.k, options.nu1, options.nu2, options.gradient)
        controlmap = _controlmap_arg(r)
        x = solve_weak_form(space, x_ref, cfg, controlmap=controlmap, diffusivity=d, reference=controlmap)
        return x, r

    if mode == ReparamMode.boundary_orth:
        return _orthogonalised(space, x_ref, options.variant, cfg, options.orth_iterations)

    if mode == ReparamMode.boundary_layer:
        d = BoundaryLayer(options.layer_mu, options.layer_k, options.layer_nu)
        s = solve_control_diffusion(space, d, cfg=cfg, reference=_controlmap_arg(r))
        return solve_weak_form(space, x_ref, cfg, controlmap=s), s

    x_orth, s_orth = _orthogonalised(space, x_ref, OrthVariant.q, cfg, options.orth_iterations)
    k_target = options.k_target or mean_transverse_derivative(x_orth) / options.layer_ratio
    b = None
    for it in range(options.layer_iterations):
        s = boundary_layer_orthogonal(x_orth, s_orth, k_target, cfg, b=b)
        x = solve_weak_form(space, x_orth, cfg, controlmap=s)
        if it + 1 < options.layer_iterations:
            b = layer_corrected_derivatives(x, s, cfg)
    return x, s


def _orthogonalised(
    space: MultipatchSpace, x_ref: GeometryMap, variant: OrthVariant, cfg: SolverConfig, iterations: int
) -> Tuple[GeometryMap, ControlMap]:
    s = boundary_orth_controlmap(x_ref, variant, cfg)
    x = solve_weak_form(space, x_ref, cfg, controlmap=s)
    for _ in range(iterations - 1):
        s = update_orth_controlmap(x, s, cfg)
        x = solve_weak_form(space, x, cfg, controlmap=s)
    return x, s

