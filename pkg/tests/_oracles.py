"""Independent brute-force oracles shared by the test modules.

These deliberately avoid the code paths they are used to check: dense
Gaussian elimination with partial pivoting for linear solves, a Cholesky
reduction plus the dense direct eigensolver for generalized pairs, and a
classical RK4 integrator for the 1-D transfer ODE.
"""
from __future__ import annotations

import numpy as np

from thinwg import linalg


def gauss_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n = a.shape[0]
    for k in range(n - 1):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if p != k:
            a[[k, p]] = a[[p, k]]
            b[[k, p]] = b[[p, k]]
        for i in range(k + 1, n):
            f = a[i, k] / a[k, k]
            a[i, k:] -= f * a[k, k:]
            b[i] -= f * b[k]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - a[i, i + 1:] @ x[i + 1:]) / a[i, i]
    return x


def dense_pair_eigenvalues(k_dense: np.ndarray, m_dense: np.ndarray) -> np.ndarray:
    """Eigenvalues of K u = lambda M u via Cholesky reduction + dense solve."""
    low = np.linalg.cholesky(m_dense)
    tmp = np.linalg.solve(low, k_dense)
    a_std = np.linalg.solve(low, tmp.T).T
    spec, _ = linalg.dense_eig_small(0.5 * (a_std + a_std.T))
    return spec.values


def rk4_transfer(lam: float, length: float, v: float, steps: int = 20000) -> np.ndarray:
    """Fundamental matrix of -u'' + v u = lam u over [0, length] by RK4."""
    h = length / steps
    y = np.eye(2)

    def rhs(y_):
        # y = (u, u'); u'' = (v - lam) u
        return np.vstack([y_[1], (v - lam) * y_[0]])

    for _ in range(steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def fem1d_pair(n_cells: int, length: float = 1.0):
    """P1 stiffness/mass pair on [0, length] with Neumann ends, as CsrMatrix."""
    h = length / n_cells
    n = n_cells + 1
    rows, cols, kv, mv = [], [], [], []
    for e in range(n_cells):
        idx = [e, e + 1]
        ke = np.array([[1, -1], [-1, 1]]) / h
        me = np.array([[2, 1], [1, 2]]) * h / 6
        for a in range(2):
            for b in range(2):
                rows.append(idx[a])
                cols.append(idx[b])
                kv.append(ke[a, b])
                mv.append(me[a, b])
    k = linalg.csr_from_triplets(n, n, rows, cols, kv, symmetric=True)
    m = linalg.csr_from_triplets(n, n, rows, cols, mv, symmetric=True)
    return k, m


def fd_interface_dense(l_minus: float, l_plus: float, h: float,
                       kind: str = "delta_prime", strength: float = 1.0,
                       v_left: float = 0.0, v_right: float = 0.0):
    """Dense doubled-node FD pencil for the interval point-interaction model.

    Plain index loops on purpose: assembled independently of the package so
    it can serve as an oracle for both the shooting and the sparse FD routes.
    Returns (K, m_diag) with K dense symmetric and a diagonal lumped mass.
    """
    nl = int(round(-l_minus / h))
    nr = int(round(l_plus / h))
    hl = -l_minus / nl
    hr = l_plus / nr
    shared = kind in ("none", "delta") or (kind == "delta_prime" and strength == 0.0)
    n = nl + nr + (1 if shared else 2)
    k = np.zeros((n, n))
    m = np.zeros(n)
    iface_l = nl  # index of the last left node (z = 0-)

    def add_cell(i, j, hc, v):
        k[i, i] += 1 / hc + v * hc / 2
        k[j, j] += 1 / hc + v * hc / 2
        k[i, j] -= 1 / hc
        k[j, i] -= 1 / hc
        m[i] += hc / 2
        m[j] += hc / 2

    for c in range(nl):
        add_cell(c, c + 1, hl, v_left)
    first_r = iface_l if shared else iface_l + 1
    for c in range(nr):
        add_cell(first_r + c, first_r + c + 1, hr, v_right)
    if kind == "delta":
        k[iface_l, iface_l] += strength
    elif kind == "delta_prime" and strength > 0.0 and np.isfinite(strength):
        w = 1.0 / strength
        k[iface_l, iface_l] += w
        k[iface_l + 1, iface_l + 1] += w
        k[iface_l, iface_l + 1] -= w
        k[iface_l + 1, iface_l] -= w
    return k, m


def fd_interface_eigs(l_minus, l_plus, h, kind="delta_prime", strength=1.0,
                      count=6):
    """Smallest eigenvalues of the dense doubled-node FD pencil."""
    k, m = fd_interface_dense(l_minus, l_plus, h, kind, strength)
    scale = 1 / np.sqrt(m)
    sym = k * scale[:, None] * scale[None, :]
    return np.linalg.eigvalsh(0.5 * (sym + sym.T))[:count]


def tridiag_char_log(kdiag, koff, mdiag, lam):
    """Characteristic determinant det(K - lam M) of a tridiagonal pencil,
    returned as (sign, log magnitude) via the LDL^T pivot recurrence."""
    n = len(kdiag)
    sign = 1.0
    logmag = 0.0
    d_prev = 0.0
    off_prev = 0.0
    for i in range(n):
        d = kdiag[i] - lam * mdiag[i]
        if i > 0:
            d -= off_prev * off_prev / d_prev
        if d == 0.0:
            return 0.0, -np.inf
        sign *= 1.0 if d > 0 else -1.0
        logmag += np.log(abs(d))
        d_prev = d
        if i < n - 1:
            off_prev = koff[i]
    return sign, logmag


def fd_interface_tridiag(l_minus: float, l_plus: float, h: float,
                         kind: str = "delta_prime", strength: float = 1.0,
                         v_left: float = 0.0, v_right: float = 0.0):
    """Tridiagonal layout of fd_interface_dense for fine meshes:
    returns (kdiag, koff, mdiag)."""
    nl = int(round(-l_minus / h))
    nr = int(round(l_plus / h))
    hl = -l_minus / nl
    hr = l_plus / nr
    shared = kind in ("none", "delta") or (kind == "delta_prime" and strength == 0.0)
    n = nl + nr + (1 if shared else 2)
    kdiag = np.zeros(n)
    koff = np.zeros(n - 1)
    mdiag = np.zeros(n)
    iface_l = nl

    def add_cell(i, hc, v):
        kdiag[i] += 1 / hc + v * hc / 2
        kdiag[i + 1] += 1 / hc + v * hc / 2
        koff[i] -= 1 / hc
        mdiag[i] += hc / 2
        mdiag[i + 1] += hc / 2

    for c in range(nl):
        add_cell(c, hl, v_left)
    first_r = iface_l if shared else iface_l + 1
    for c in range(nr):
        add_cell(first_r + c, hr, v_right)
    if kind == "delta":
        kdiag[iface_l] += strength
    elif kind == "delta_prime" and strength > 0.0 and np.isfinite(strength):
        w = 1.0 / strength
        kdiag[iface_l] += w
        kdiag[iface_l + 1] += w
        koff[iface_l] -= w
    return kdiag, koff, mdiag
