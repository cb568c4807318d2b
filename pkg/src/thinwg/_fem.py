"""Bilinear quadrilateral element kernels shared by the 2D solvers.

Corner ordering everywhere: reference square corners (-1,-1), (1,-1),
(1,1), (-1,1), counterclockwise.  General (possibly degenerate) quads use
2x2 Gauss quadrature of the isoparametric map; axis-aligned rectangles have
closed forms that double as an independent cross-check in the tests.
"""

from __future__ import annotations

import numpy as np

from .errors import StructuralError
from .linalg import CsrMatrix, csr_from_triplets

_G = 1.0 / np.sqrt(3.0)
_GAUSS = np.array([(-_G, -_G), (_G, -_G), (_G, _G), (-_G, _G)])
_CORNERS = np.array([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])


def _shape(xi: float, eta: float):
    n = 0.25 * np.array([(1 - xi) * (1 - eta), (1 + xi) * (1 - eta),
                         (1 + xi) * (1 + eta), (1 - xi) * (1 + eta)])
    dn = 0.25 * np.array([[-(1 - eta), -(1 - xi)],
                          [(1 - eta), -(1 + xi)],
                          [(1 + eta), (1 + xi)],
                          [-(1 + eta), (1 - xi)]])
    return n, dn


_SHAPES = [_shape(xi, eta) for xi, eta in _GAUSS]


def quad_element_matrices(coords: np.ndarray):
    """Stiffness and mass matrices for a batch of bilinear quads.

    coords: (m, 4, 2) corner positions.  Returns (k_e, m_e) of shape
    (m, 4, 4).  Degenerate quads (a collapsed edge, e.g. polar center
    elements) are fine as long as the Jacobian stays positive at the
    interior Gauss points; inverted elements raise.
    """
    coords = np.asarray(coords, dtype=np.float64)
    m = coords.shape[0]
    k_e = np.zeros((m, 4, 4))
    m_e = np.zeros((m, 4, 4))
    for nvals, dn in _SHAPES:
        jac = np.einsum("enj,ni->eij", coords, dn)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        if np.any(det <= 0):
            raise StructuralError("inverted or zero-area element in batch")
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1]
        inv[:, 1, 1] = jac[:, 0, 0]
        inv[:, 0, 1] = -jac[:, 0, 1]
        inv[:, 1, 0] = -jac[:, 1, 0]
        inv /= det[:, None, None]
        # jac[i, j] = dx_j/dxi_i, so dN/dx_k = dn[n, j] * inv(jac)[k, j]
        grad = np.einsum("nj,ekj->enk", dn, inv)
        k_e += np.einsum("eni,emi->enm", grad, grad) * det[:, None, None]
        m_e += np.outer(nvals, nvals)[None, :, :] * det[:, None, None]
    return k_e, m_e


def rect_element_matrices(w, h):
    """Closed-form Q1 matrices for axis-aligned w-by-h rectangles.

    Vectorized over arrays w, h; returns (m, 4, 4) pairs matching
    quad_element_matrices on the same geometry.
    """
    w = np.atleast_1d(np.asarray(w, dtype=np.float64))
    h = np.atleast_1d(np.asarray(h, dtype=np.float64))
    if np.any(w <= 0) or np.any(h <= 0):
        raise StructuralError("rectangle sides must be positive")
    kxx = np.array([[2, -2, -1, 1], [-2, 2, 1, -1],
                    [-1, 1, 2, -2], [1, -1, -2, 2]], dtype=np.float64)
    kyy = np.array([[2, 1, -1, -2], [1, 2, -2, -1],
                    [-1, -2, 2, 1], [-2, -1, 1, 2]], dtype=np.float64)
    mass = np.array([[4, 2, 1, 2], [2, 4, 2, 1],
                     [1, 2, 4, 2], [2, 1, 2, 4]], dtype=np.float64)
    ratio1 = (h / w)[:, None, None]
    ratio2 = (w / h)[:, None, None]
    k_e = (ratio1 * kxx + ratio2 * kyy) / 6.0
    m_e = (w * h)[:, None, None] * mass / 36.0
    return k_e, m_e


def assemble_pair(n_nodes: int, quads: np.ndarray, k_e: np.ndarray,
                  m_e: np.ndarray | None = None):
    """Scatter element matrices into global CSR operators."""
    quads = np.asarray(quads, dtype=np.int64)
    rows = np.repeat(quads, 4, axis=1).ravel()
    cols = np.tile(quads, (1, 4)).ravel()
    k_mat = csr_from_triplets(n_nodes, n_nodes, rows, cols, k_e.ravel(),
                              symmetric=True)
    if m_e is None:
        return k_mat
    m_mat = csr_from_triplets(n_nodes, n_nodes, rows, cols, m_e.ravel(),
                              symmetric=True)
    return k_mat, m_mat
