"""Univariate open B-spline bases, tensor-product patches and exact coefficient transfer"""
from dataclasses import dataclass
from functools import lru_cache
import logging
from typing import List, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from . import config
from .constants import KNOT_TOLERANCE
from .errors import CompatibilityError, InputError

logger = logging.getLogger(__name__)
logger.setLevel(config.LOG_LEVEL)


@dataclass(frozen=True)
class KnotVector:
    """Open knot vector, first and last knot repeated ``degree + 1`` times"""
    degree: int
    knots: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
        p = self.degree
        if p < 1:
            raise InputError(f"Spline degree must be at least 1, got {p}")
        knots = np.asarray(self.knots)
        if len(knots) < 2 * (p + 1):
            raise InputError(f"A degree {p} knot vector needs at least {2 * (p + 1)} knots, got {len(knots)}")
        if np.any(np.diff(knots) < 0):
            raise InputError(f"Knots must be nondecreasing: {self.knots}")
        if knots[0] == knots[-1]:
            raise InputError("Knot vector spans an empty domain")
        if not (np.all(knots[: p + 1] == knots[0]) and np.all(knots[-(p + 1):] == knots[-1])):
            raise InputError(f"Knot vector is not open: {self.knots}")
        interior = knots[p + 1: -(p + 1)]
        if len(interior):
            _, counts = np.unique(interior, return_counts=True)
            if counts.max() > p:
                raise InputError(f"Interior knot multiplicity exceeds the degree {p}: {self.knots}")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.knots)

    @property
    def n(self) -> int:
        """Number of basis functions"""
        return len(self.knots) - self.degree - 1

    @property
    def domain(self) -> Tuple[float, float]:
        return self.knots[0], self.knots[-1]

    @property
    def breaks(self) -> np.ndarray:
        """Distinct knots"""
        return np.unique(self.array)

    @property
    def interior_breaks(self) -> np.ndarray:
        return self.breaks[1:-1]

    @property
    def spans(self) -> List[Tuple[float, float]]:
        """Nonempty knot spans"""
        b = self.breaks
        return list(zip(b[:-1], b[1:]))

    @property
    def greville(self) -> np.ndarray:
        """Greville abscissae"""
        p = self.degree
        k = self.array
        return np.array([k[i + 1: i + p + 1].mean() for i in range(self.n)])

    def find_span(self, x: np.ndarray) -> np.ndarray:
        """Knot span index, the right endpoint belongs to the last span"""
        span = np.searchsorted(self.array, x, side="right") - 1
        return np.clip(span, self.degree, self.n - 1)

    def reversed(self) -> "KnotVector":
        a, b = self.domain
        return KnotVector(self.degree, tuple(a + b - k for k in reversed(self.knots)))

    def is_close(self, other: "KnotVector") -> bool:
        return (
            self.degree == other.degree
            and len(self.knots) == len(other.knots)
            and bool(np.allclose(self.array, other.array, atol=KNOT_TOLERANCE, rtol=0))
        )


def make_open_knot_vector(degree: int, interior_breaks: Sequence[float] = ()) -> KnotVector:
    """Open knot vector on [0, 1] with each interior break of multiplicity one"""
    breaks = np.asarray(interior_breaks, dtype=float)
    if degree < 1:
        raise InputError(f"Spline degree must be at least 1, got {degree}")
    if len(breaks) and (breaks.min() <= 0.0 or breaks.max() >= 1.0):
        raise InputError(f"Interior breaks must lie strictly inside (0, 1): {list(breaks)}")
    if np.any(np.diff(breaks) <= 0):
        raise InputError(f"Interior breaks must be strictly increasing: {list(breaks)}")
    return KnotVector(degree, tuple([0.0] * (degree + 1) + list(breaks) + [1.0] * (degree + 1)))


def uniform_knot_vector(degree: int, elements: int) -> KnotVector:
    return make_open_knot_vector(degree, [i / elements for i in range(1, elements)])


def _basis_derivatives(kv: KnotVector, span: int, x: float, nd: int) -> np.ndarray:
    """Values and derivatives up to order ``nd`` of the ``p + 1`` functions active on ``span``"""
    p = kv.degree
    U = kv.array
    ndu = np.zeros((p + 1, p + 1))
    ndu[0, 0] = 1.0
    left = np.zeros(p + 1)
    right = np.zeros(p + 1)
    for j in range(1, p + 1):
        left[j] = x - U[span + 1 - j]
        right[j] = U[span + j] - x
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved

    ders = np.zeros((nd + 1, p + 1))
    ders[0] = ndu[:, p]
    top = min(nd, p)
    a = np.zeros((2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for k in range(1, top + 1):
            d = 0.0
            rk = r - k
            pk = p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d += a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1
    factor = p
    for k in range(1, top + 1):
        ders[k] *= factor
        factor *= p - k
    return ders


def _check_domain(kv: KnotVector, x: np.ndarray):
    a, b = kv.domain
    if np.any(x < a - KNOT_TOLERANCE) or np.any(x > b + KNOT_TOLERANCE):
        raise InputError(f"Evaluation point outside the spline domain [{a}, {b}]")


def eval_basis(kv: KnotVector, x: float, deriv: int = 0) -> Tuple[int, np.ndarray]:
    """First active index and the ``p + 1`` active values (or derivatives) at ``x``"""
    _check_domain(kv, np.asarray(x))
    x = min(max(float(x), kv.domain[0]), kv.domain[1])
    span = int(kv.find_span(x))
    return span - kv.degree, _basis_derivatives(kv, span, x, deriv)[deriv]


def basis_values(kv: KnotVector, x: np.ndarray, deriv: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised ``eval_basis``, only distinct coordinates are evaluated"""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _check_domain(kv, x)
    x = np.clip(x, *kv.domain)
    if not len(x):
        return np.zeros(0, dtype=int), np.zeros((0, kv.degree + 1))
    unique, inverse = np.unique(x, return_inverse=True)
    inverse = inverse.ravel()
    spans = kv.find_span(unique)
    values = np.array([_basis_derivatives(kv, s, u, deriv)[deriv] for s, u in zip(spans, unique)])
    return (spans - kv.degree)[inverse], values[inverse]


def basis_matrix(kv: KnotVector, x: np.ndarray, deriv: int = 0) -> sparse.csr_matrix:
    """Collocation matrix ``B[k, i] = N_i^(deriv)(x_k)``"""
    first, values = basis_values(kv, x, deriv)
    m, width = values.shape
    rows = np.repeat(np.arange(m), width)
    cols = (first[:, None] + np.arange(width)).ravel()
    return sparse.csr_matrix((values.ravel(), (rows, cols)), shape=(m, kv.n))


def refine_dyadic(kv: KnotVector) -> KnotVector:
    """Insert the midpoint of every nonempty knot span"""
    midpoints = [(a + b) / 2 for a, b in kv.spans]
    return KnotVector(kv.degree, tuple(sorted(kv.knots + tuple(midpoints))))


def _knot_difference(coarse: KnotVector, fine: KnotVector) -> List[float]:
    """Knots of ``fine`` missing from ``coarse``, raises if ``coarse`` is not contained in ``fine``"""
    missing = []
    i = 0
    for k in fine.knots:
        if i < len(coarse.knots) and abs(coarse.knots[i] - k) <= KNOT_TOLERANCE:
            i += 1
        elif i < len(coarse.knots) and coarse.knots[i] < k:
            break
        else:
            missing.append(k)
    if i != len(coarse.knots):
        raise CompatibilityError(f"Knot vector {fine.knots} does not refine {coarse.knots}")
    return missing


def _insertion_matrix(kv: KnotVector, t: float) -> Tuple[sparse.csr_matrix, KnotVector]:
    """Single knot insertion operator mapping coefficients on ``kv`` to the refined knot vector"""
    p = kv.degree
    U = kv.array
    n = kv.n
    k = int(np.clip(np.searchsorted(U, t, side="right") - 1, p, n - 1))
    alpha = np.ones(n + 1)
    alpha[k + 1:] = 0.0
    for i in range(k - p + 1, k + 1):
        alpha[i] = (t - U[i]) / (U[i + p] - U[i])
    rows, cols, vals = [], [], []
    for i in range(n + 1):
        if i < n and alpha[i] != 0.0:
            rows.append(i)
            cols.append(i)
            vals.append(alpha[i])
        if i >= 1 and alpha[i] != 1.0:
            rows.append(i)
            cols.append(i - 1)
            vals.append(1.0 - alpha[i])
    T = sparse.csr_matrix((vals, (rows, cols)), shape=(n + 1, n))
    return T, KnotVector(p, tuple(sorted(kv.knots + (t,))))


@lru_cache(maxsize=256)
def prolongation_matrix(coarse: KnotVector, fine: KnotVector) -> sparse.csr_matrix:
    """Matrix ``P`` with ``sum_j (P c)_j N_j^fine = sum_i c_i N_i^coarse`` (repeated knot insertion)"""
    if coarse.degree != fine.degree:
        raise CompatibilityError(f"Cannot prolong between degrees {coarse.degree} and {fine.degree}")
    P = sparse.identity(coarse.n, format="csr")
    current = coarse
    for t in _knot_difference(coarse, fine):
        T, current = _insertion_matrix(current, t)
        P = T @ P
    P = P.tocsr()
    P.eliminate_zeros()
    return P


def transfer_coefficients(kv_from: KnotVector, coeffs: np.ndarray, kv_to: KnotVector, samples: int = 50) -> np.ndarray:
    """
    Express a spline on ``kv_from`` in the basis of ``kv_to``.  Nested knot vectors of equal degree use knot
    insertion, anything else (degree elevation) goes through Greville interpolation and is verified to be exact.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if kv_from.degree == kv_to.degree:
        try:
            return prolongation_matrix(kv_from, kv_to) @ coeffs
        except CompatibilityError:
            pass
    return interpolate_exact(lambda t: basis_matrix(kv_from, t) @ coeffs, kv_to, samples=samples)


def interpolate_exact(func, kv: KnotVector, samples: int = 50, tolerance: float = 1e-10) -> np.ndarray:
    """Interpolate ``func`` at the Greville abscissae of ``kv`` and refuse the result if it is not exact"""
    g = kv.greville
    values = np.asarray(func(g))
    coeffs = splinalg.spsolve(basis_matrix(kv, g).tocsc(), values)
    coeffs = np.asarray(coeffs).reshape(values.shape)
    t = np.linspace(*kv.domain, samples)
    reference = np.asarray(func(t))
    error = np.abs(basis_matrix(kv, t) @ coeffs - reference).max()
    scale = 1.0 + np.abs(reference).max()
    if error > tolerance * scale:
        raise CompatibilityError(
            f"Data is not representable on knot vector {kv.knots} (max deviation {error:.3e})"
        )
    return coeffs


@dataclass(frozen=True)
class SplineCurve:
    """Planar spline curve, ``points`` holds one control point per basis function"""
    kv: KnotVector
    points: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape != (self.kv.n, 2):
            raise InputError(
                f"Curve of degree {self.kv.degree} with {len(self.kv.knots)} knots needs {self.kv.n} control points"
            )
        object.__setattr__(self, "points", tuple(tuple(p) for p in pts))

    @property
    def control_points(self) -> np.ndarray:
        return np.asarray(self.points)

    def evaluate(self, t: np.ndarray, deriv: int = 0) -> np.ndarray:
        return basis_matrix(self.kv, t, deriv) @ self.control_points

    def reversed(self) -> "SplineCurve":
        return SplineCurve(self.kv.reversed(), tuple(reversed(self.points)))

    @property
    def start(self) -> np.ndarray:
        return self.control_points[0]

    @property
    def end(self) -> np.ndarray:
        return self.control_points[-1]


@dataclass(frozen=True)
class TensorBasis:
    """Tensor-product basis on the reference square, local index ``i + n_u * j``"""
    kv_u: KnotVector
    kv_v: KnotVector

    @property
    def shape(self) -> Tuple[int, int]:
        return self.kv_u.n, self.kv_v.n

    @property
    def dimension(self) -> int:
        return self.kv_u.n * self.kv_v.n

    @property
    def degree(self) -> int:
        return max(self.kv_u.degree, self.kv_v.degree)

    def index(self, i, j):
        return i + self.kv_u.n * j

    @property
    def elements(self) -> List[Tuple[Tuple[float, float], Tuple[float, float]]]:
        """Element grid, ``u`` runs fastest"""
        return [(su, sv) for sv in self.kv_v.spans for su in self.kv_u.spans]

    def evaluate(self, mu: np.ndarray, du: int = 0, dv: int = 0) -> sparse.csr_matrix:
        """Sparse matrix of the ``(du, dv)`` partial derivatives of every basis function at the rows of ``mu``"""
        mu = np.atleast_2d(mu)
        fu, vu = basis_values(self.kv_u, mu[:, 0], du)
        fv, vv = basis_values(self.kv_v, mu[:, 1], dv)
        m = len(mu)
        wu, wv = vu.shape[1], vv.shape[1]
        cols = (fu[:, None, None] + np.arange(wu)[None, :, None]) + self.kv_u.n * (
            fv[:, None, None] + np.arange(wv)[None, None, :]
        )
        data = vu[:, :, None] * vv[:, None, :]
        rows = np.repeat(np.arange(m), wu * wv)
        return sparse.csr_matrix((data.ravel(), (rows, cols.ravel())), shape=(m, self.dimension))

    def refine(self) -> "TensorBasis":
        return TensorBasis(refine_dyadic(self.kv_u), refine_dyadic(self.kv_v))

    def prolongation(self, fine: "TensorBasis") -> sparse.csr_matrix:
        # local index i + n_u * j is the Kronecker ordering P_v (x) P_u
        return sparse.kron(
            prolongation_matrix(self.kv_v, fine.kv_v), prolongation_matrix(self.kv_u, fine.kv_u), format="csr"
        )

    def greville(self) -> np.ndarray:
        gu, gv = self.kv_u.greville, self.kv_v.greville
        uu, vv = np.meshgrid(gu, gv)
        return np.column_stack([uu.ravel(), vv.ravel()])
