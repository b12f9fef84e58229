"""Spline maps over a multipatch space and the derivative operators of its basis"""
from dataclasses import dataclass, field
import logging
from typing import Any, Dict

import numpy as np
from scipy import sparse

from . import config
from .topology import MultipatchSpace, bilinear_map, bilinear_second_derivative, locate
from .utils import inv2, det2

logger = logging.getLogger(__name__)
logger.setLevel(config.LOG_LEVEL)


CELL_OPERATORS = ("val", "d1", "d2", "d11", "d12", "d22", "m1", "m2")


def _scale(values: np.ndarray, matrix: sparse.csr_matrix) -> sparse.csr_matrix:
    return sparse.diags(values) @ matrix


def patch_operators(space: MultipatchSpace, patch: int, mu: np.ndarray) -> Dict[str, sparse.csr_matrix]:
    """
    Global basis operators at points of one patch.  ``m1``/``m2`` are reference square derivatives, ``d*`` are
    derivatives in parametric coordinates obtained through the bilinear patch map.
    """
    mu = np.atleast_2d(mu)
    _, J = bilinear_map(space.quadrangulation, patch, mu)
    K = inv2(J)
    c = bilinear_second_derivative(space.quadrangulation, patch)
    b = space.bases[patch]
    m1 = b.evaluate(mu, 1, 0)
    m2 = b.evaluate(mu, 0, 1)
    h11 = b.evaluate(mu, 2, 0)
    h12 = b.evaluate(mu, 1, 1)
    h22 = b.evaluate(mu, 0, 2)

    # grad_xi = K^T grad_mu
    d1 = _scale(K[:, 0, 0], m1) + _scale(K[:, 1, 0], m2)
    d2 = _scale(K[:, 0, 1], m1) + _scale(K[:, 1, 1], m2)
    # H_xi = K^T (H_mu - sum_k d_xi_k * H_mu m_k) K, the bilinear map only has a mixed second derivative
    t12 = h12 - c[0] * d1 - c[1] * d2
    T = {(0, 0): h11, (0, 1): t12, (1, 0): t12, (1, 1): h22}

    def hess(a, bb):
        out = None
        for (ci, di), Tm in T.items():
            term = _scale(K[:, ci, a] * K[:, di, bb], Tm)
            out = term if out is None else out + term
        return out

    ops = {
        "val": b.evaluate(mu),
        "m1": m1,
        "m2": m2,
        "d1": d1,
        "d2": d2,
        "d11": hess(0, 0),
        "d12": hess(0, 1),
        "d22": hess(1, 1),
    }
    return {k: space.to_global(patch, v) for k, v in ops.items()}


def operators(space: MultipatchSpace, patches: np.ndarray, mu: np.ndarray) -> Dict[str, sparse.csr_matrix]:
    """``patch_operators`` for points spread over several patches, rows follow the input order"""
    patches = np.asarray(patches)
    if not len(patches):
        return {k: sparse.csr_matrix((0, space.dimension)) for k in CELL_OPERATORS}
    order = np.argsort(patches, kind="stable")
    restore = np.argsort(order)
    blocks = []
    for i in np.unique(patches):
        sel = order[patches[order] == i]
        blocks.append(patch_operators(space, int(i), mu[sel]))
    return {k: sparse.vstack([blk[k] for blk in blocks], format="csr")[restore] for k in CELL_OPERATORS}


def identity_coefficients(space: MultipatchSpace) -> np.ndarray:
    """Coefficients of the identity map of the parametric domain (bilinear data has linear precision)"""
    coeffs = np.zeros((space.dimension, 2))
    for i, b in enumerate(space.bases):
        xi, _ = bilinear_map(space.quadrangulation, i, b.greville())
        coeffs[space.local_to_global[i]] = xi
    return coeffs


@dataclass
class GeometryMap:
    """``x = sum_i c_i phi_i`` over a multipatch space, ``coeffs`` has one row per global basis function"""
    space: MultipatchSpace
    coeffs: np.ndarray
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.dimension, 2):
            raise ValueError(f"Expected coefficients of shape {(self.space.dimension, 2)}, got {self.coeffs.shape}")

    @classmethod
    def identity(cls, space: MultipatchSpace) -> "GeometryMap":
        return cls(space, identity_coefficients(space), {"source": "identity"})

    @classmethod
    def from_state(cls, space: MultipatchSpace, state: np.ndarray, **provenance) -> "GeometryMap":
        """Inverse of ``state``: component-major coefficient vector"""
        return cls(space, np.asarray(state).reshape(2, space.dimension).T.copy(), dict(provenance))

    @property
    def state(self) -> np.ndarray:
        return self.coeffs.T.ravel()

    def patch_operators(self, patch: int, mu: np.ndarray) -> Dict[str, sparse.csr_matrix]:
        return patch_operators(self.space, patch, mu)

    def evaluate_mu(self, patch: int, mu: np.ndarray, op: str = "val") -> np.ndarray:
        return self.patch_operators(patch, mu)[op] @ self.coeffs

    def jacobian(self, patch: int, mu: np.ndarray) -> np.ndarray:
        """``J[:, a, b] = d x_a / d xi_b``"""
        ops = self.patch_operators(patch, mu)
        return np.stack([ops["d1"] @ self.coeffs, ops["d2"] @ self.coeffs], axis=-1)

    def jacobian_mu(self, patch: int, mu: np.ndarray) -> np.ndarray:
        """``J[:, a, b] = d x_a / d mu_b`` on the reference square"""
        ops = self.patch_operators(patch, mu)
        return np.stack([ops["m1"] @ self.coeffs, ops["m2"] @ self.coeffs], axis=-1)

    def hessian(self, patch: int, mu: np.ndarray) -> np.ndarray:
        """``H[:, i, k, l] = d^2 x_i / d xi_k d xi_l``"""
        ops = self.patch_operators(patch, mu)
        h11, h12, h22 = (ops[k] @ self.coeffs for k in ("d11", "d12", "d22"))
        return np.stack([np.stack([h11, h12], axis=-1), np.stack([h12, h22], axis=-1)], axis=-1)

    def det(self, patch: int, mu: np.ndarray) -> np.ndarray:
        return det2(self.jacobian(patch, mu))

    def det_mu(self, patch: int, mu: np.ndarray) -> np.ndarray:
        return det2(self.jacobian_mu(patch, mu))

    def evaluate_at(self, xi: np.ndarray) -> np.ndarray:
        """Evaluate at points of the parametric domain"""
        xi = np.atleast_2d(xi)
        patches, mu = locate(self.space.quadrangulation, xi)
        out = np.empty((len(xi), 2))
        for i in np.unique(patches):
            sel = patches == i
            out[sel] = self.evaluate_mu(int(i), mu[sel])
        return out

    def prolong(self, fine: MultipatchSpace) -> "GeometryMap":
        return GeometryMap(fine, self.space.prolongation(fine) @ self.coeffs, dict(self.provenance))

    def boundary_error(self, reference: np.ndarray) -> float:
        """Largest deviation of boundary coefficients from ``reference``"""
        dofs = self.space.boundary_dofs
        return float(np.abs(self.coeffs[dofs] - reference[dofs]).max()) if len(dofs) else 0.0

    def with_coeffs(self, coeffs: np.ndarray, **provenance) -> "GeometryMap":
        return GeometryMap(self.space, coeffs, {**self.provenance, **provenance})
