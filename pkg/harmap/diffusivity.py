"""Diffusivities: symmetric positive definite 2x2 fields steering controlmaps and geometry maps"""
import abc
from dataclasses import dataclass, field, replace
import logging
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from . import config
from .constants import PARALLEL_TOLERANCE, TANGENT_TOLERANCE, MonitorKind
from .errors import BarrierError, DiffusivityError, InputError, TopologyError
from .maps import GeometryMap, operators
from .topology import MultipatchSpace, Quadrangulation, VertexSet, bilinear_map
from .utils import det2

logger = logging.getLogger(__name__)
logger.setLevel(config.LOG_LEVEL)


@dataclass
class DiffusivityContext:
    """
    Everything a diffusivity may depend on at a batch of points: the patch and reference coordinates, the
    parametric point ``xi`` with the bilinear Jacobian ``mjac``, the reference controlmap ``r`` with
    ``dmu_r = d r / d mu`` and, when a geometry is available, ``x`` with ``dmu_x = d x / d mu``.
    """
    patch: np.ndarray
    mu: np.ndarray
    xi: np.ndarray
    mjac: np.ndarray
    r: np.ndarray
    dmu_r: np.ndarray
    x: Optional[np.ndarray] = None
    dmu_x: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.mu)


def _map_values(m: GeometryMap, patch: np.ndarray, mu: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ops = operators(m.space, patch, mu)
    return ops["val"] @ m.coeffs, np.stack([ops["m1"] @ m.coeffs, ops["m2"] @ m.coeffs], axis=-1)


def context_at(
    q: Quadrangulation,
    patch: np.ndarray,
    mu: np.ndarray,
    geometry: Optional[GeometryMap] = None,
    reference: Optional[GeometryMap] = None,
) -> DiffusivityContext:
    """Context at arbitrary reference points"""
    patch = np.atleast_1d(np.asarray(patch, dtype=int))
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    xi = np.empty((len(mu), 2))
    mjac = np.empty((len(mu), 2, 2))
    for i in np.unique(patch):
        sel = patch == i
        xi[sel], mjac[sel] = bilinear_map(q, int(i), mu[sel])
    r, dmu_r = (xi, mjac) if reference is None else _map_values(reference, patch, mu)
    x, dmu_x = (None, None) if geometry is None else _map_values(geometry, patch, mu)
    return DiffusivityContext(patch, mu, xi, mjac, r, dmu_r, x, dmu_x)


def context_from_state(layout, state: np.ndarray, points, reference: Optional[GeometryMap] = None, prefix: str = "x"):
    """Context at quadrature points, the geometry taken from an assembly state vector"""
    x = np.column_stack([layout.values(state, points, f"{prefix}{a}") for a in (1, 2)])
    J = np.stack(
        [np.stack([layout.values(state, points, f"{prefix}{a}", f"d{b}") for b in (1, 2)], axis=-1) for a in (1, 2)],
        axis=1,
    )
    if reference is None:
        r, dmu_r = points.xi, points.mjac
    else:
        ops = points.ops(reference.space)
        r = ops["val"] @ reference.coeffs
        dmu_r = np.stack([ops["m1"] @ reference.coeffs, ops["m2"] @ reference.coeffs], axis=-1)
    return DiffusivityContext(points.patch, points.mu, points.xi, points.mjac, r, dmu_r, x, J @ points.mjac)


def context_from_points(points, geometry: Optional[GeometryMap] = None, reference: Optional[GeometryMap] = None):
    """Context at quadrature points for frozen maps"""
    if reference is None:
        r, dmu_r = points.xi, points.mjac
    else:
        ops = points.ops(reference.space)
        r = ops["val"] @ reference.coeffs
        dmu_r = np.stack([ops["m1"] @ reference.coeffs, ops["m2"] @ reference.coeffs], axis=-1)
    x, dmu_x = None, None
    if geometry is not None:
        ops = points.ops(geometry.space)
        x = ops["val"] @ geometry.coeffs
        dmu_x = np.stack([ops["m1"] @ geometry.coeffs, ops["m2"] @ geometry.coeffs], axis=-1)
    return DiffusivityContext(points.patch, points.mu, points.xi, points.mjac, r, dmu_r, x, dmu_x)


def check_spd(D: np.ndarray, ctx: DiffusivityContext, tolerance: float = 1e-10):
    """Raise a ``DiffusivityError`` naming the first point where ``D`` is not symmetric positive definite"""
    scale = np.maximum(1.0, np.abs(D).max(axis=(1, 2)))
    asymmetric = np.abs(D[:, 0, 1] - D[:, 1, 0]) > tolerance * scale
    sym = 0.5 * (D + np.swapaxes(D, 1, 2))
    indefinite = np.linalg.eigvalsh(sym)[:, 0] <= 0
    bad = np.flatnonzero(asymmetric | ~np.isfinite(D).all(axis=(1, 2)) | indefinite)
    if len(bad):
        k = bad[0]
        raise DiffusivityError(
            f"Diffusivity is not symmetric positive definite in patch {int(ctx.patch[k])} at mu={ctx.mu[k].tolist()}: "
            f"{D[k].tolist()}"
        )


class Diffusivity(abc.ABC):
    """Builds a symmetric positive definite matrix per point"""
    state_dependent: bool = False

    @abc.abstractmethod
    def evaluate(self, ctx: DiffusivityContext) -> np.ndarray:
        ...

    def linearise(self, ctx: DiffusivityContext, h: float = 1e-6):
        """
        ``D`` with central-difference derivatives w.r.t. the entries of ``d x / d xi`` (``[:, a, b]``) and the
        values of ``x`` (``[:, a]``).
        """
        D = self.evaluate(ctx)
        m = len(ctx)
        dD_dmu = np.zeros((m, 2, 2, 2, 2))
        dD_dval = np.zeros((m, 2, 2, 2))
        for a in range(2):
            for b in range(2):
                step = h * np.maximum(1.0, np.abs(ctx.dmu_x[:, a, b]))
                plus, minus = ctx.dmu_x.copy(), ctx.dmu_x.copy()
                plus[:, a, b] += step
                minus[:, a, b] -= step
                dD_dmu[:, a, b] = (
                    self.evaluate(replace(ctx, dmu_x=plus)) - self.evaluate(replace(ctx, dmu_x=minus))
                ) / (2 * step)[:, None, None]
            step = h * np.maximum(1.0, np.abs(ctx.x[:, a]))
            plus, minus = ctx.x.copy(), ctx.x.copy()
            plus[:, a] += step
            minus[:, a] -= step
            dD_dval[:, a] = (
                self.evaluate(replace(ctx, x=plus)) - self.evaluate(replace(ctx, x=minus))
            ) / (2 * step)[:, None, None]
        # dmu_x = J mjac
        dD_dJ = np.einsum("nabij,ncb->nacij", dD_dmu, ctx.mjac)
        return D, dD_dJ, dD_dval

    def describe(self) -> Dict:
        return {"name": type(self).__name__}


def _scalar(values: np.ndarray) -> np.ndarray:
    return values[:, None, None] * np.eye(2)


def _det_mu(ctx: DiffusivityContext) -> np.ndarray:
    if ctx.dmu_x is None:
        raise InputError("Diffusivity needs a geometry map")
    return det2(ctx.dmu_x)


@dataclass
class Identity(Diffusivity):
    def evaluate(self, ctx: DiffusivityContext) -> np.ndarray:
        return np.broadcast_to(np.eye(2), (len(ctx), 2, 2)).copy()


@dataclass
class InterfaceRemoval(Diffusivity):
    """``sum_j t_j (x) t_j`` over the reference-square tangents ``t_j = d r / d mu_j`` of a controlmap"""
    controlmap: Optional[GeometryMap] = None
    normalised: bool = False

    def evaluate(self, ctx: DiffusivityContext) -> np.ndarray:
        tangents = ctx.dmu_r if self.controlmap is None else _map_values(self.controlmap, ctx.patch, ctx.mu)[1]
        norms = np.linalg.norm(tangents, axis=1)
        if np.any(norms < TANGENT_TOLERANCE):
            k = int(np.argmin(norms.min(axis=1)))
            raise DiffusivityError(f"Vanishing controlmap tangent in patch {int(ctx.patch[k])} at mu={ctx.mu[k].tolist()}")
        if self.normalised:
            tangents = tangents / norms[:, None, :]
        return np.einsum("nij,nkj->nik", tangents, tangents)

    def describe(self) -> Dict:
        return {"name": "InterfaceRemoval", "normalised": self.normalised}


@dataclass
class HomogenisationSigma(Diffusivity):
    """``sigma^k I`` with ``sigma = det d x / d mu``, meant for the controlmap equation"""
    k: float = 1.0
    state_dependent = True

    def evaluate(self, ctx: DiffusivityContext) -> np.ndarray:
        if self.k == 0:
            return Identity().evaluate(ctx)
        det = _det_mu(ctx)
        if np.any(det <= 0):
            raise BarrierError("Cell-size diffusivity evaluated at a degenerate map")
        return _scalar(det ** self.k)

    def describe(self) -> Dict:
        return {"name": "HomogenisationSigma", "k": self.k}


@dataclass
class HomogenisationOmega(Diffusivity):
    """``omega^k I`` with ``omega = 1 / det d x / d mu``, meant for the geometry equation"""
    k: float = 1.0
    state_dependent = True

    def evaluate(self, ctx: DiffusivityContext) -> np.ndarray:
        if self.k == 0:
            return Identity().evaluate(ctx)
        det = _det_mu(ctx)
        if np.any(det <= 0):
            raise BarrierError("Cell-size diffusivity evaluated at a degenerate map")
        return _scalar(det ** (-self.k))

    def describe(self) -> Dict:
        return {"name": "HomogenisationOmega", "k": self.k}


@dataclass
class RankOneFrame(Diffusivity):
    """``2 / (a + 1) sigma^k (a v1 (x) v1 + v2 (x) v2)`` with one frame and weight per patch"""
    frames: np.ndarray = None
    weights: np.ndarray = None
    k: float = 0.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (2, 2):
            raise InputError("Frames must have shape (patches, 2, 2)")
        if np.any(self.weights <= 0):
            raise InputError("Frame weights must be positive")
        norms = np.linalg.norm(self.frames, axis=2)
        if np.any(norms < TANGENT_TOLERANCE):
            raise InputError("Frame vectors must not vanish")
        self.frames = self.frames / norms[:, :, None]
        if np.any(np.abs(det2(self.frames)) < PARALLEL_TOLERANCE):
            raise InputError("Frame vectors must not be parallel")
        self.state_dependent = self.k != 0

    def evaluate(self, ctx: DiffusivityContext) -> np.ndarray:
        v1 = self.frames[ctx.patch, 0]
        v2 = self.frames[ctx.patch, 1]
        a = self.weights[ctx.patch]
        D = a[:, None, None] * np.einsum("ni,nj->nij", v1, v1) + np.einsum("ni,nj->nij", v2, v2)
        D *= (2 / (a + 1))[:, None, None]
        if self.k != 0:
            det = _det_mu(ctx)
            if np.any(det <= 0):
                raise BarrierError("Frame diffusivity evaluated at a degenerate map")
            D *= (det ** self.k)[:, None, None]
        return D

    def describe(self) -> Dict:
        return {"name": "RankOneFrame", "k": self.k, "weights": self.weights.tolist(), "frames": self.frames.tolist()}


def ring_monitor(x: np.ndarray, centre=(0.5, 0.5), radius: float = 0.3, width: float = 0.05) -> np.ndarray:
    return np.exp(-(((np.linalg.norm(x - np.asarray(centre), axis=1) - radius) / width) ** 2))


def gaussian_monitor(x: np.ndarray, centre=(0.5, 0.5), width: float = 0.15) -> np.ndarray:
    return np.exp(-(np.linalg.norm(x - np.asarray(centre), axis=1) ** 2) / (2 * width ** 2))


MONITORS: Dict[MonitorKind, Callable[[np.ndarray], np.ndarray]] = {
    MonitorKind.ring: ring_monitor,
    MonitorKind.gaussian: gaussian_monitor,
}


@dataclass
class ScalarMonitor(Diffusivity):
    """``I / (nu1 f(x)^k + nu2)`` for a monitor ``f`` over physical coordinates, or its gradient norm"""
    f: Callable[[np.ndarray], np.ndarray] = ring_monitor
    k: float = 1.0
    nu1: float = 1.0
    nu2: float = 0.01
    gradient: bool = False
    state_dependent = True

    def __post_init__(self):
        if not self.nu2 > 0:
            raise InputError(f"nu2 must be positive, got {self.nu2}")

    def monitor(self, x: np.ndarray) -> np.ndarray:
        if not self.gradient:
            return self.f(x)
        h = 1e-6
        grad = np.column_stack([
            (self.f(x + h * e) - self.f(x - h * e)) / (2 * h) for e in np.eye(2)
        ])
        return np.linalg.norm(grad, axis=1)

    def evaluate(self, ctx: DiffusivityContext) -> np.ndarray:
        if ctx.x is None:
            raise InputError("Monitor diffusivity needs a geometry map")
        return _scalar(1.0 / (self.nu1 * self.monitor(ctx.x) ** self.k + self.nu2))

    def describe(self) -> Dict:
        name = getattr(self.f, "__name__", "monitor")
        return {"name": "ScalarMonitor", "monitor": name, "k": self.k, "nu1": self.nu1, "nu2": self.nu2,
                "gradient": self.gradient}


@dataclass
class BoundaryLayer(Diffusivity):
    """``(1 - exp(-mu |r|^2)) |r|^k r_hat (x) r_hat + nu I`` in reference controlmap coordinates"""
    mu: float = 30.0
    k: float = 2.0
    nu: float = 0.005

    def __post_init__(self):
        if not self.nu > 0:
            raise InputError(f"nu must be positive, got {self.nu}")

    def evaluate(self, ctx: DiffusivityContext) -> np.ndarray:
        r = ctx.r
        norm = np.linalg.norm(r, axis=1)
        safe = np.where(norm > 0, norm, 1.0)
        unit = r / safe[:, None]
        scale = np.where(norm > 0, (1 - np.exp(-self.mu * norm ** 2)) * norm ** self.k, 0.0)
        return scale[:, None, None] * np.einsum("ni,nj->nij", unit, unit) + self.nu * np.eye(2)

    def describe(self) -> Dict:
        return {"name": "BoundaryLayer", "mu": self.mu, "k": self.k, "nu": self.nu}


CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


@dataclass
class VertexBlend(Diffusivity):
    """
    Gaussian blend making ``inner`` single-valued at the images ``r(v_i)`` of shared patch vertices:
    ``(1 - sum_i g_i) D + sum_i g_i Dbar_i`` with ``g_i(y) = A_i exp(-(kappa / d_i |y - y_i|)^2)``.
    """
    inner: Diffusivity = None
    kappa: float = 9.0
    centres: np.ndarray = None
    d_min: np.ndarray = None
    amplitudes: np.ndarray = None
    limits: np.ndarray = None

    def __post_init__(self):
        self.state_dependent = self.inner.state_dependent

    def blend(self, y: np.ndarray) -> np.ndarray:
        """``g_i(y)`` for every vertex, shape ``(points, vertices)``"""
        dist = np.linalg.norm(y[:, None, :] - self.centres[None], axis=2)
        return self.amplitudes * np.exp(-((self.kappa / self.d_min) * dist) ** 2)

    def evaluate(self, ctx: DiffusivityContext) -> np.ndarray:
        D = self.inner.evaluate(ctx)
        g = self.blend(ctx.r)
        return (1 - g.sum(axis=1))[:, None, None] * D + np.einsum("nv,vij->nij", g, self.limits)

    def describe(self) -> Dict:
        return {"name": "VertexBlend", "kappa": self.kappa, "inner": self.inner.describe()}


def regularise_vertex(
    inner: Diffusivity,
    kappa: float,
    q: Quadrangulation,
    geometry: Optional[GeometryMap] = None,
    reference: Optional[GeometryMap] = None,
    use_mean: Optional[bool] = None,
    space: Optional[MultipatchSpace] = None,
) -> VertexBlend:
    """
    Wrap ``inner`` so it is continuous at shared patch vertices.  One-sided limits are sampled a parametric
    offset inside every adjacent patch and frozen at construction.  Given the ``space`` the blend is solved on,
    a blend narrower than its elements is reported: the regularised solutions only settle under refinement
    once the Gaussians are resolved.
    """
    if not kappa > 0:
        raise InputError(f"kappa must be positive, got {kappa}")
    use_mean = config.USE_VERTEX_MEAN if use_mean is None else use_mean
    adjacency = VertexSet.from_quadrangulation(q)
    if not adjacency.vertex_ids:
        raise TopologyError("No patch vertex is shared by two patches")

    limits, centres = [], []
    delta = config.VERTEX_OFFSET
    for v in adjacency.vertex_ids:
        patches = np.array([p for p, _ in adjacency.adjacent[v]])
        mu = np.array([CORNERS[c] + delta * (1 - 2 * CORNERS[c]) for _, c in adjacency.adjacent[v]])
        ctx = context_at(q, patches, mu, geometry, reference)
        values = inner.evaluate(ctx)
        limits.append(values.mean(axis=0) if use_mean else values.sum(axis=0))
        centres.append(ctx.r.mean(axis=0))
    centres = np.asarray(centres)
    images = q.vertices.copy()
    images[adjacency.vertex_ids] = centres
    d_min = VertexSet.from_quadrangulation(q, images).d_min

    dist = np.linalg.norm(centres[:, None, :] - centres[None], axis=2)
    G = np.exp(-((kappa / d_min[None, :]) * dist) ** 2)
    try:
        amplitudes = np.linalg.solve(G, np.ones(len(centres)))
    except np.linalg.LinAlgError as e:
        raise TopologyError("Vertex normalisation system is singular (coincident vertex images)") from e
    if np.linalg.cond(G) > 1e12:
        raise TopologyError("Vertex normalisation system is singular (coincident vertex images)")
    logger.debug(f"Vertex blend over {len(centres)} vertices, amplitudes {amplitudes.tolist()}")
    blend = VertexBlend(inner, kappa, centres, d_min, amplitudes, np.asarray(limits))
    if space is not None and blend_resolution(blend, space) < 1:
        logger.warning(
            f"Vertex blend of width {(d_min / kappa).min():.3e} is narrower than the elements "
            f"({element_size(space):.3e}), refine or lower kappa"
        )
    return blend


def element_size(space: MultipatchSpace) -> float:
    """Largest element side of the bilinear patch coverings, in parametric coordinates"""
    q = space.quadrangulation
    h = 0.0
    for patch, basis in enumerate(space.bases):
        c = q.corners(patch)
        along_u = max(np.linalg.norm(c[1] - c[0]), np.linalg.norm(c[2] - c[3])) / len(basis.kv_u.spans)
        along_v = max(np.linalg.norm(c[3] - c[0]), np.linalg.norm(c[2] - c[1])) / len(basis.kv_v.spans)
        h = max(h, along_u, along_v)
    return h


def blend_resolution(blend: VertexBlend, space: MultipatchSpace) -> float:
    """Narrowest Gaussian width ``d_i / kappa`` over the element size; below one the blend is under-resolved"""
    return float((blend.d_min / blend.kappa).min() / element_size(space))


def homogenisation(k: float, mode: str = "sigma") -> Diffusivity:
    """Cell-size homogenisation: ``sigma^k I`` for the controlmap equation or ``omega^k I`` for the geometry one"""
    if mode == "sigma":
        return HomogenisationSigma(k)
    if mode == "omega":
        return HomogenisationOmega(k)
    raise InputError(f"Unknown homogenisation mode {mode!r}, expected 'sigma' or 'omega'")


def monitor_from_name(name: str) -> Callable[[np.ndarray], np.ndarray]:
    return MONITORS[MonitorKind(name)]


def describe_chain(items: Sequence[Diffusivity]):
    return [d.describe() for d in items]
