"""Neumann FEM for two thin tubes coupled through a window in the z = 0 wall.

The domain is the rectangle (l_minus, l_plus) x (eps*s_a, eps*s_b) slit
along z = 0 except for the window |x| <= d*r.  A tensor-product mesh is
graded toward the window tips where the coupling boundary layer lives; the
slit is realized by duplicating the z = 0 nodes outside the window, which
keeps the discretization H1-conforming on the slit domain and makes the
Neumann condition natural (no constraint rows anywhere).

Eigenfunctions are compared with 1D models through the cross-section
average (the profile map), and the periodic arrangement of windows is
handled by quasi-periodic cell problems embedded as real symmetric pencils.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from ._fem import assemble_pair, rect_element_matrices
from .errors import BudgetError, ContractError, SizeError, StructuralError
from .linalg import CsrMatrix, Spectrum, csr_from_triplets, smallest_eigenpairs
from .solvable1d import BandStructure, PiecewisePotential

_CELL_BUDGET = 10 ** 7


@dataclass(frozen=True)
class WaveguideGeometry:
    """Two tubes (l_minus,0) and (0,l_plus) of cross-section eps*(s_a,s_b),
    coupled through the window |x| <= d*r in the z = 0 wall.

    d = 0 means no window (fully decoupled tubes).
    """

    l_minus: float
    l_plus: float
    eps: float
    d: float
    s_a: float
    s_b: float
    r: float

    def __post_init__(self):
        if not (math.isfinite(self.l_minus) and math.isfinite(self.l_plus)
                and self.l_minus < 0 < self.l_plus):
            raise ContractError("need finite l_minus < 0 < l_plus")
        if not 0 < self.eps < 1:
            raise ContractError("eps must lie in (0, 1)")
        if not 0 <= self.d <= self.eps:
            raise ContractError(
                f"window scale d = {self.d!r} violates 0 <= d <= eps")
        if not self.s_a < 0 < self.s_b:
            raise ContractError("cross-section (s_a, s_b) must contain 0")
        if not self.r > 0:
            raise ContractError("window half-width factor r must be positive")
        if not (self.s_a < -self.r and self.r < self.s_b):
            raise ContractError(
                "window closure [-r, r] must lie inside (s_a, s_b)")
        if self.d * self.r >= min(self.l_plus, -self.l_minus):
            raise ContractError("window wider than the shorter tube")

    @property
    def window_half(self) -> float:
        return self.d * self.r

    @property
    def mu_cross(self) -> float:
        """1D measure of the scaled cross-section."""
        return self.eps * (self.s_b - self.s_a)

    @property
    def lambda_s(self) -> float:
        """Smallest nonzero Neumann eigenvalue of the unscaled cross-section."""
        return (math.pi / (self.s_b - self.s_a)) ** 2

    @property
    def x_lo(self) -> float:
        return self.eps * self.s_a

    @property
    def x_hi(self) -> float:
        return self.eps * self.s_b


@dataclass(frozen=True)
class MeshGrading:
    """Geometric grading toward the window: first cell min_frac*(d*r),
    growth factor ratio, far cells eps*far_frac (capped so that no pairing
    of a far cell with a window cell can exceed the aspect bound)."""

    ratio: float = 1.15
    min_frac: float = 0.125
    far_frac: float = 0.125
    aspect_cap: float = 50.0

    def __post_init__(self):
        if not self.ratio > 1:
            raise ContractError("grading ratio must exceed 1")
        if not 0 < self.min_frac <= 1:
            raise ContractError("min_frac must lie in (0, 1]")
        if not 0 < self.far_frac <= 1:
            raise ContractError("far_frac must lie in (0, 1]")
        if not self.aspect_cap >= 2:
            raise ContractError("aspect_cap must be >= 2")


def _ladder(span: float, h0: float, ratio: float, cap: float) -> np.ndarray:
    """Offsets 0 < t_1 < ... < t_k = span, first step ~h0 growing by ratio
    up to cap, uniformly rescaled (downward) to land exactly on span."""
    if span <= 0:
        raise StructuralError("ladder span must be positive")
    h0 = min(h0, cap, span)
    steps = [h0]
    total = h0
    while total < span:
        nxt = min(steps[-1] * ratio, cap)
        if nxt >= cap * (1 - 1e-12):
            # finish with uniform cap-size cells, counted exactly
            n_more = max(int(math.ceil((span - total) / cap - 1e-12)), 1)
            steps.extend([cap] * n_more)
            total += cap * n_more
            break
        steps.append(nxt)
        total += nxt
    arr = np.cumsum(steps) * (span / total)
    arr[-1] = span
    return arr


def _window_interior(half: float, h0: float, ratio: float,
                     cap: float) -> np.ndarray:
    """x lines of [-half, half], graded fine toward both tips."""
    lad = _ladder(half, h0, ratio, cap)
    left = -half + lad
    pts = np.concatenate([[-half], left[:-1], [0.0], -left[:-1][::-1], [half]])
    return np.unique(pts)


def _insert_breaks(lines: np.ndarray, breaks, protected: np.ndarray,
                   lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    out = lines
    for b in breaks:
        if not (lo < b < hi):
            continue
        gap = np.abs(out - b).min()
        if gap <= 1e-9 * span:
            continue
        j = int(np.abs(out - b).argmin())
        local = np.diff(out)[min(max(j - 1, 0), out.size - 2)]
        drop = (gap < 0.25 * local
                and np.abs(protected - out[j]).min() > 1e-12 * span)
        if drop:
            out = np.delete(out, j)
        out = np.sort(np.append(out, b))
    return out


@dataclass(frozen=True)
class Mesh2d:
    """Tensor mesh with the z = 0 line duplicated outside the window.

    Base node ids are iz*len(x_coords) + ix (this row doubles as the left
    copy at z = 0); right copies of the duplicated z = 0 nodes occupy ids
    from len(z)*len(x) onward, in increasing ix order.  window_x marks the
    x lines where the two sides share one node.  geometry is the
    WaveguideGeometry echo when built from one, else None.
    """

    z_coords: np.ndarray
    x_coords: np.ndarray
    iz0: int
    window_half: float
    window_x: np.ndarray
    right_ids: np.ndarray
    quads: np.ndarray
    n_nodes: int
    geometry: "WaveguideGeometry | None" = None

    @property
    def nz(self) -> int:
        return self.z_coords.size

    @property
    def nx(self) -> int:
        return self.x_coords.size

    @property
    def n_cells(self) -> int:
        return self.quads.shape[0]

    @property
    def decoupled(self) -> bool:
        return 0 < self.iz0 < self.nz - 1 and not bool(self.window_x.any())

    def base_id(self, iz, ix):
        return iz * self.nx + ix

    def node_positions(self) -> np.ndarray:
        zz, xx = np.meshgrid(self.z_coords, self.x_coords, indexing="ij")
        pos = np.empty((self.n_nodes, 2))
        pos[:self.nz * self.nx, 0] = zz.ravel()
        pos[:self.nz * self.nx, 1] = xx.ravel()
        dup = self.n_nodes - self.nz * self.nx
        if dup:
            pos[-dup:, 0] = 0.0
            pos[-dup:, 1] = self.x_coords[~self.window_x]
        return pos

    def z0_left_ids(self) -> np.ndarray:
        return self.base_id(self.iz0, np.arange(self.nx))

    def z0_right_ids(self) -> np.ndarray:
        return self.right_ids

    def component_masks(self):
        """(left, right) boolean node masks; shared window nodes belong to
        both, so for a decoupled mesh these partition the nodes."""
        left = np.zeros(self.n_nodes, dtype=bool)
        right = np.zeros(self.n_nodes, dtype=bool)
        base = self.nz * self.nx
        for iz in range(self.nz):
            ids = self.base_id(iz, np.arange(self.nx))
            if iz < self.iz0:
                left[ids] = True
            elif iz > self.iz0:
                right[ids] = True
            else:
                left[ids] = True
                right[ids[self.window_x]] = True
        right[base:] = True
        return left, right


def mesh_from_lines(z: np.ndarray, x: np.ndarray, window_half: float,
                    geometry: WaveguideGeometry | None = None) -> Mesh2d:
    """Tensor mesh on the given lines, slit along z = 0 outside the window.

    z = 0 must be a mesh line.  If it is the first or last line (a tube
    mesh whose end wall is z = 0) there is no interior slit and no node is
    duplicated.  window_half <= 0 duplicates the whole z = 0 row.
    """
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if z.ndim != 1 or x.ndim != 1 or z.size < 2 or x.size < 2:
        raise ContractError("need at least two mesh lines per direction")
    if np.any(np.diff(z) <= 0) or np.any(np.diff(x) <= 0):
        raise ContractError("mesh lines must be strictly increasing")
    nz, nx = z.size, x.size
    if (nz - 1) * (nx - 1) > _CELL_BUDGET:
        raise BudgetError(
            f"mesh would have {(nz - 1) * (nx - 1)} cells (> {_CELL_BUDGET})")
    iz0 = int(np.argmin(np.abs(z)))
    scale = max(abs(z[0]), abs(z[-1]))
    if abs(z[iz0]) > 1e-12 * scale:
        raise StructuralError("z = 0 is not a mesh line")
    xscale = max(abs(x[0]), abs(x[-1]))
    if 0 < iz0 < nz - 1:
        if window_half > 0:
            window_x = np.abs(x) <= window_half + 1e-12 * xscale
        else:
            window_x = np.zeros(nx, dtype=bool)
    else:
        window_x = np.ones(nx, dtype=bool)   # boundary wall, nothing to slit
    base = nz * nx
    dup = ~window_x
    right_ids = np.empty(nx, dtype=np.int64)
    right_ids[window_x] = iz0 * nx + np.nonzero(window_x)[0]
    right_ids[dup] = base + np.arange(int(dup.sum()))
    n_nodes = base + int(dup.sum())

    iz = np.arange(nz - 1)[:, None]
    ix = np.arange(nx - 1)[None, :]
    n00 = iz * nx + ix          # corner order (z_lo,x_lo) (z_hi,x_lo)
    n10 = (iz + 1) * nx + ix    # (z_hi,x_hi) (z_lo,x_hi), counterclockwise
    n11 = n10 + 1
    n01 = n00 + 1
    # cells right of the slit take the right copies on their z_lo edge
    right_row = right_ids[None, :]
    on_slit = (iz == iz0)
    n00 = np.where(on_slit, right_row[:, :-1], n00)
    n01 = np.where(on_slit, right_row[:, 1:], n01)
    quads = np.stack([n00, n10, n11, n01], axis=-1).reshape(-1, 4)
    return Mesh2d(z, x, iz0, float(window_half), window_x, right_ids, quads,
                  n_nodes, geometry)


def build_mesh(geom: WaveguideGeometry, grading: MeshGrading = MeshGrading(),
               z_breaks=()) -> Mesh2d:
    """Graded tensor mesh of the slit domain.

    Mesh lines are exact at l_minus, 0, l_plus, the window endpoints
    +-(d*r) (in both coordinates) and at any z_breaks inside the tubes
    (potential discontinuities).  Cell count above 10^7 raises BudgetError.
    """
    w = geom.window_half
    far = geom.eps * grading.far_frac
    if w > 0:
        h0 = grading.min_frac * w
        far = min(far, 0.6 * grading.aspect_cap * h0)
        z_pos = np.concatenate([
            _ladder(w, h0, grading.ratio, far),
            w + _ladder(geom.l_plus - w, h0, grading.ratio, far)])
        z_neg = -np.concatenate([
            _ladder(w, h0, grading.ratio, far),
            w + _ladder(-geom.l_minus - w, h0, grading.ratio, far)])
        x_mid = _window_interior(w, h0, grading.ratio, far)
        x_up = w + _ladder(geom.x_hi - w, h0, grading.ratio, far)
        x_dn = -w - _ladder(-w - geom.x_lo, h0, grading.ratio, far)
        x = np.concatenate([x_dn[::-1], x_mid, x_up])
    else:
        z_pos = _ladder(geom.l_plus, far, grading.ratio, far)
        z_neg = -_ladder(-geom.l_minus, far, grading.ratio, far)
        x = geom.x_lo + np.concatenate(
            [[0.0], _ladder(geom.x_hi - geom.x_lo, far, grading.ratio, far)])
    z = np.concatenate([z_neg[::-1], [0.0], z_pos])
    protected = np.array([geom.l_minus, -w, 0.0, w, geom.l_plus])
    z = _insert_breaks(z, z_breaks, protected, geom.l_minus, geom.l_plus)
    mesh = mesh_from_lines(z, x, w, geom)
    dz = np.diff(mesh.z_coords)
    dx = np.diff(mesh.x_coords)
    aspect = max(dz.max() / dx.min(), dx.max() / dz.min())
    if aspect > grading.aspect_cap * (1 + 1e-9):
        raise StructuralError(
            f"mesh aspect ratio {aspect:.1f} exceeds {grading.aspect_cap}")
    return mesh


def refine_mesh(mesh: Mesh2d) -> Mesh2d:
    """Uniform refinement: every cell split in four by its midlines."""
    z = np.sort(np.concatenate(
        [mesh.z_coords, 0.5 * (mesh.z_coords[:-1] + mesh.z_coords[1:])]))
    x = np.sort(np.concatenate(
        [mesh.x_coords, 0.5 * (mesh.x_coords[:-1] + mesh.x_coords[1:])]))
    return mesh_from_lines(z, x, mesh.window_half, mesh.geometry)


def mesh_to_text(mesh: Mesh2d) -> str:
    """Plain-text dump: z lines, x lines, duplication map, elements.

    Sections: "z_lines N" / "x_lines N" (one coordinate repr per line),
    "duplication N" (rows "x_index left_id right_id"), "elements N" (rows
    of 4 node ids, corners (z_lo,x_lo) (z_hi,x_lo) (z_hi,x_hi) (z_lo,x_hi)).
    """
    out = ["thinwg mesh 1",
           f"nodes {mesh.n_nodes} window_half {mesh.window_half!r} "
           f"iz0 {mesh.iz0}",
           f"z_lines {mesh.nz}"]
    out.extend(repr(v) for v in mesh.z_coords.tolist())
    out.append(f"x_lines {mesh.nx}")
    out.extend(repr(v) for v in mesh.x_coords.tolist())
    dup = np.nonzero(~mesh.window_x)[0]
    out.append(f"duplication {dup.size}")
    left = mesh.z0_left_ids()
    for ix in dup.tolist():
        out.append(f"{ix} {left[ix]} {mesh.right_ids[ix]}")
    out.append(f"elements {mesh.n_cells}")
    for row in mesh.quads.tolist():
        out.append(" ".join(str(v) for v in row))
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class AssembledPair:
    """Stiffness-plus-potential and mass operators with their provenance."""

    k_mat: CsrMatrix
    m_mat: CsrMatrix
    geometry: "WaveguideGeometry | None"
    potential: PiecewisePotential
    mesh: Mesh2d


def _potential_at(potential: PiecewisePotential, z: np.ndarray) -> np.ndarray:
    vals = np.asarray(potential.values, dtype=np.float64)
    idx = np.searchsorted(np.asarray(potential.breakpoints), z, side="right")
    return vals[idx]


def assemble(mesh: Mesh2d,
             potential: PiecewisePotential | None = None) -> AssembledPair:
    """Q1 stiffness + V(z)-weighted mass, and the mass matrix.

    The potential is sampled at element z midpoints, so piecewise-constant
    V is integrated exactly whenever its breakpoints are mesh lines
    (build_mesh(..., z_breaks=V.breakpoints) guarantees that).
    """
    if potential is None:
        potential = PiecewisePotential.constant(0.0)
    dz = np.diff(mesh.z_coords)
    dx = np.diff(mesh.x_coords)
    w = np.repeat(dz, dx.size)
    h = np.tile(dx, dz.size)
    k_e, m_e = rect_element_matrices(w, h)
    zmid = np.repeat(0.5 * (mesh.z_coords[:-1] + mesh.z_coords[1:]), dx.size)
    v = _potential_at(potential, zmid)
    k_mat, m_mat = assemble_pair(mesh.n_nodes, mesh.quads,
                                 k_e + v[:, None, None] * m_e, m_e)
    return AssembledPair(k_mat, m_mat, mesh.geometry, potential, mesh)


def _line_pair(lines: np.ndarray, vmid: np.ndarray | None = None):
    """P1 stiffness/mass on one coordinate line set, as small dense matrices.

    vmid folds a per-element potential into the stiffness (element midpoint
    sampling, matching assemble()).
    """
    n = lines.size
    h = np.diff(lines)
    coef = np.zeros_like(h) if vmid is None else np.asarray(vmid, dtype=np.float64)
    a = np.zeros((n, n))
    mm = np.zeros((n, n))
    i = np.arange(n - 1)
    kd = 1.0 / h + coef * h / 3.0
    ko = -1.0 / h + coef * h / 6.0
    a[i, i] += kd
    a[i + 1, i + 1] += kd
    a[i, i + 1] += ko
    a[i + 1, i] += ko
    mm[i, i] += h / 3.0
    mm[i + 1, i + 1] += h / 3.0
    mm[i, i + 1] += h / 6.0
    mm[i + 1, i] += h / 6.0
    return a, mm


def _gen_eig(a: np.ndarray, mm: np.ndarray):
    """Eigendecomposition of the dense pencil (a, mm), mm-orthonormal basis."""
    c = np.linalg.cholesky(mm)
    ci = np.linalg.inv(c)
    w, v = np.linalg.eigh(ci @ a @ ci.conj().T)
    return w, ci.conj().T @ v


def _fold_dense(a: np.ndarray, theta: float) -> np.ndarray:
    """Fold the last line of a dense 1D pencil member onto the first with
    phase exp(i*theta)."""
    n = a.shape[0]
    p = np.zeros((n, n - 1), dtype=np.complex128)
    p[: n - 1] = np.eye(n - 1)
    p[n - 1, 0] = np.exp(1j * theta)
    return p.conj().T @ a @ p


def _dense_sub(a: CsrMatrix, ids: np.ndarray) -> np.ndarray:
    """Dense principal submatrix of a CSR matrix on the given rows."""
    pos = {int(g): i for i, g in enumerate(ids)}
    sub = np.zeros((ids.size, ids.size))
    for i, g in enumerate(ids):
        lo, hi = a.row_offsets[g], a.row_offsets[g + 1]
        for c, v in zip(a.col_indices[lo:hi], a.values[lo:hi]):
            j = pos.get(int(c))
            if j is not None:
                sub[i, j] = v
    return sub


def _tensor_precond(pair: AssembledPair, theta: float | None = None):
    """Exact inverse of (K + sigma*M) built on the tensor-product structure.

    On the product mesh the pencil without the slit duplication is exactly
    (Az x Mx + Mz x Ax, Mz x Mx) for 1D pencils along each axis (potential
    included in Az), so two small dense eigendecompositions give an O(n)
    solve of the rectangle.  The slit changes matrix entries only among the
    cut row, the row above it, and the duplicated copies, so the true
    operator is the rectangle-plus-duplicates one plus a low-rank update on
    that index set, inverted exactly by a Woodbury correction (one small
    dense factor per shift).  A fully decoupled mesh splits into two exact
    rectangles instead.  With theta set, the z pencil is folded
    quasiperiodically and the solve runs in complex arithmetic on the
    real-embedded vectors.

    Returns a callable (block, sigma) -> block for smallest_eigenpairs, or
    None when the mesh shape has no tensor route (decoupled fold, or a slit
    touching the period boundary).
    """
    mesh = pair.mesh
    folded = theta is not None
    if folded and mesh.decoupled:
        return None
    zmid = 0.5 * (mesh.z_coords[:-1] + mesh.z_coords[1:])
    vmid = _potential_at(pair.potential, zmid)
    ax, mx = _line_pair(mesh.x_coords)
    wx, phix = _gen_eig(ax, mx)
    nz, nx = mesh.nz, mesh.nx

    if mesh.decoupled:
        azl, mzl = _line_pair(mesh.z_coords[: mesh.iz0 + 1], vmid[: mesh.iz0])
        azr, mzr = _line_pair(mesh.z_coords[mesh.iz0:], vmid[mesh.iz0:])
        wzl, phizl = _gen_eig(azl, mzl)
        wzr, phizr = _gen_eig(azr, mzr)
        nl = mesh.iz0 + 1
        nr = nz - mesh.iz0
        split = (mesh.iz0 + 1) * nx

        def apply_split(blk: np.ndarray, sigma: float) -> np.ndarray:
            blk = np.asarray(blk, dtype=np.float64)
            k = blk.shape[1]
            out = np.empty_like(blk)
            gl = blk[:split].T.reshape(k, nl, nx)
            t = phizl.T @ gl @ phix
            t /= np.maximum(wzl[:, None] + wx[None, :] + sigma, 0.1 * sigma)
            out[:split] = (phizl @ t @ phix.T).reshape(k, split).T
            gr = np.concatenate(
                [blk[mesh.right_ids][None].transpose(2, 0, 1),
                 blk[split: nz * nx].T.reshape(k, nr - 1, nx)], axis=1)
            t = phizr.T @ gr @ phix
            t /= np.maximum(wzr[:, None] + wx[None, :] + sigma, 0.1 * sigma)
            tr = phizr @ t @ phix.T
            out[mesh.right_ids] = tr[:, 0, :].T
            out[split: nz * nx] = tr[:, 1:, :].reshape(k, (nr - 1) * nx).T
            return out

        return apply_split

    az, mz = _line_pair(mesh.z_coords, vmid)
    if folded:
        wz, phiz = _gen_eig(_fold_dense(az, theta), _fold_dense(mz, theta))
    else:
        wz, phiz = _gen_eig(az, mz)
    nzz = nz - 1 if folded else nz
    nb = nzz * nx

    def rect_solve(g: np.ndarray, sigma: float) -> np.ndarray:
        t = phiz.conj().T @ g @ phix
        t /= np.maximum(wz[:, None] + wx[None, :] + sigma, 0.1 * sigma)
        return phiz @ t @ phix.T

    dup_cols = np.nonzero(~mesh.window_x)[0]
    ndup = dup_cols.size

    if ndup == 0:
        def apply_rect(blk: np.ndarray, sigma: float) -> np.ndarray:
            blk = np.asarray(blk, dtype=np.float64)
            k = blk.shape[1]
            if folded:
                psi = blk[:nb] + 1j * blk[nb:]
            else:
                psi = blk
            out = rect_solve(psi.T.reshape(k, nzz, nx), sigma).reshape(k, nb).T
            if folded:
                return np.concatenate([out.real, out.imag], axis=0)
            return out

        return apply_rect

    if folded and mesh.iz0 + 1 >= mesh.nz - 1:
        return None

    # the update set S: slit row, the row above (whose couplings move to the
    # copies), and the duplicated nodes themselves; everything the slit
    # touches lies in S x S, and none of it crosses the fold, so the entries
    # are plain real ones from the unfolded pencil
    cols = np.arange(nx)
    iza = np.concatenate([np.full(nx, mesh.iz0), np.full(nx, mesh.iz0 + 1)])
    ixa = np.concatenate([cols, cols])
    r_full = mesh.right_ids[dup_cols]
    shift = nx if folded else 0
    s_orig = np.concatenate([mesh.base_id(iza, ixa), r_full])
    s_ids = np.concatenate([mesh.base_id(iza, ixa), r_full - shift])
    n_rows = 2 * nx
    s_size = n_rows + ndup
    tk = (az[np.ix_(iza, iza)] * mx[np.ix_(ixa, ixa)]
          + mz[np.ix_(iza, iza)] * ax[np.ix_(ixa, ixa)])
    tm = mz[np.ix_(iza, iza)] * mx[np.ix_(ixa, ixa)]
    e_k = _dense_sub(pair.k_mat, s_orig)
    e_m = _dense_sub(pair.m_mat, s_orig)
    d_k = e_k[n_rows:, n_rows:].copy()
    d_m = e_m[n_rows:, n_rows:].copy()
    e_k[:n_rows, :n_rows] -= tk
    e_m[:n_rows, :n_rows] -= tm
    # the duplicate block itself is carried by the reference operator
    e_k[n_rows:, n_rows:] = 0.0
    e_m[n_rows:, n_rows:] = 0.0

    cache: dict = {}

    def factor(sigma: float):
        got = cache.get(sigma)
        if got is not None:
            return got
        esub = e_k + sigma * e_m
        d_mat = d_k + sigma * d_m
        dtype = np.complex128 if folded else np.float64
        unit = np.zeros((n_rows, nzz, nx), dtype=dtype)
        unit[np.arange(n_rows), iza, ixa] = 1.0
        sol = rect_solve(unit, sigma)
        gmat = np.zeros((s_size, s_size), dtype=dtype)
        gmat[:n_rows, :n_rows] = sol[:, iza, ixa].T
        gmat[n_rows:, n_rows:] = np.linalg.inv(d_mat)
        qq = np.eye(s_size, dtype=dtype) + gmat @ esub
        got = (esub, d_mat, qq)
        cache[sigma] = got
        return got

    def ref_solve(psi: np.ndarray, d_mat: np.ndarray, sigma: float,
                  k: int) -> np.ndarray:
        out = np.empty_like(psi)
        out[:nb] = rect_solve(psi[:nb].T.reshape(k, nzz, nx),
                              sigma).reshape(k, nb).T
        out[nb:] = np.linalg.solve(d_mat, psi[nb:])
        return out

    def apply(blk: np.ndarray, sigma: float) -> np.ndarray:
        blk = np.asarray(blk, dtype=np.float64)
        k = blk.shape[1]
        esub, d_mat, qq = factor(sigma)
        if folded:
            half = blk.shape[0] // 2
            psi = blk[:half] + 1j * blk[half:]
        else:
            psi = blk
        y = ref_solve(psi, d_mat, sigma, k)
        corr = esub @ np.linalg.solve(qq, y[s_ids])
        spread = np.zeros_like(psi)
        spread[s_ids] = corr
        out = y - ref_solve(spread, d_mat, sigma, k)
        if folded:
            return np.concatenate([out.real, out.imag], axis=0)
        return out

    return apply


def solve_modes(pair: AssembledPair, m: int, tol: float = 1e-8,
                seed: int = 0):
    """Lowest m eigenpairs of the assembled pencil.

    For V = 0 the constant kernel is known exactly (one vector per
    connected component), so it is deflated and re-added instead of
    iterated: the zero eigenvalues come out exact, with the measured
    ||K y|| as their residuals.
    """
    if m < 1:
        raise SizeError("m must be >= 1")
    mesh = pair.mesh
    papply = _tensor_precond(pair)
    v_zero = all(v == 0 for v in pair.potential.values)
    consts = []
    if v_zero:
        if mesh.decoupled:
            left, right = mesh.component_masks()
            consts = [left.astype(np.float64), right.astype(np.float64)]
        else:
            consts = [np.ones(mesh.n_nodes)]
    n0 = len(consts)
    if not n0:
        return smallest_eigenpairs(pair.k_mat, pair.m_mat, m, tol, seed=seed,
                                   precond=papply)
    y = np.column_stack(consts)
    my = pair.m_mat.matmat(y)
    y = y / np.sqrt(np.einsum("ij,ij->j", y, my))
    res0 = np.array([np.linalg.norm(pair.k_mat.matvec(y[:, j]))
                     for j in range(min(m, n0))])
    if m <= n0:
        spec = Spectrum(np.zeros(m), res0, tol, bool((res0 <= tol).all()),
                        0, "deflated")
        return spec, y[:, :m]
    spec, u = smallest_eigenpairs(pair.k_mat, pair.m_mat, m - n0, tol,
                                  seed=seed, deflation=y, precond=papply)
    full = Spectrum(np.concatenate([np.zeros(n0), spec.values]),
                    np.concatenate([res0, spec.residuals]), tol,
                    spec.converged and bool((res0 <= tol).all()),
                    spec.iterations, spec.method)
    return full, np.column_stack([y, u])


@dataclass(frozen=True)
class Profile1d:
    """Cross-section averages per z mesh line, both slit sides at z = 0.

    side is "-" for the left copy at z = 0, "+" for the right copy, ""
    elsewhere.  Rows are ordered by z with the "-" row first at 0, so
    plain trapezoid integration over (z, values) does the right thing
    (the doubled point spans zero length).
    """

    z: np.ndarray
    values: np.ndarray
    side: tuple

    def norm_sq(self) -> float:
        return float(np.trapezoid(self.values ** 2, self.z))


def cross_section_average(mesh: Mesh2d, vector: np.ndarray,
                          geom: WaveguideGeometry) -> Profile1d:
    """Profile z -> mu^{-1/2} * integral of u over the cross-section
    (trapezoid over the x mesh nodes)."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (mesh.n_nodes,):
        raise SizeError("vector length does not match the mesh node count")
    scale = 1.0 / math.sqrt(geom.mu_cross)
    slit = 0 < mesh.iz0 < mesh.nz - 1
    zs, vals, side = [], [], []
    for iz in range(mesh.nz):
        ids = mesh.base_id(iz, np.arange(mesh.nx))
        if slit and iz == mesh.iz0:
            zs.extend([0.0, 0.0])
            vals.extend([np.trapezoid(vector[ids], mesh.x_coords),
                         np.trapezoid(vector[mesh.right_ids], mesh.x_coords)])
            side.extend(["-", "+"])
        else:
            zs.append(mesh.z_coords[iz])
            vals.append(np.trapezoid(vector[ids], mesh.x_coords))
            side.append("")
    return Profile1d(np.asarray(zs), scale * np.asarray(vals), tuple(side))


def write_profile_csv(profile: Profile1d, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["z", "value", "side"])
        for z, v, s in zip(profile.z.tolist(), profile.values.tolist(),
                           profile.side):
            writer.writerow([repr(z), repr(v), s])


def _csr_triplets(a: CsrMatrix):
    rows = np.repeat(np.arange(a.nrows, dtype=np.int64),
                     np.diff(a.row_offsets))
    return rows, a.col_indices, a.values


def _fold_quasiperiodic(a: CsrMatrix, new_index: np.ndarray,
                        is_slave: np.ndarray, theta: float,
                        n_master: int) -> CsrMatrix:
    """Real [[Re,-Im],[Im,Re]] embedding of P^H A P for the constraint
    u_slave = exp(i*theta) * u_master."""
    rows, cols, vals = _csr_triplets(a)
    dphase = theta * (is_slave[cols].astype(np.float64)
                      - is_slave[rows].astype(np.float64))
    re = vals * np.cos(dphase)
    im = vals * np.sin(dphase)
    a_r, b_r = new_index[rows], new_index[cols]
    n2 = 2 * n_master
    rr = np.concatenate([a_r, a_r + n_master, a_r, a_r + n_master])
    cc = np.concatenate([b_r, b_r + n_master, b_r + n_master, b_r])
    vv = np.concatenate([re, re, -im, im])
    return csr_from_triplets(n2, n2, rr, cc, vv, symmetric=True)


def _merge_bands(intervals, tol):
    merged = []
    for lo, hi in intervals:
        if merged and lo <= merged[-1][1] + tol:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return merged


def bloch_bands(geom: WaveguideGeometry, lambda_max: float,
                thetas=None, m: int = 8,
                potential: PiecewisePotential | None = None,
                grading: MeshGrading = MeshGrading(), tol: float = 1e-8,
                seed: int = 0) -> BandStructure:
    """Floquet bands of the periodic waveguide, one window per period.

    geom is one period of length l_plus - l_minus with the window at
    z = 0; u(l_plus) = exp(i*theta) u(l_minus) is imposed by folding the
    pencil onto master nodes and embedding the complex Hermitian result
    as a real symmetric one (every eigenvalue doubled; deduplicated by
    adjacent pairing).  Band k stretches over the sampled theta extrema;
    gaps are the complement below lambda_max, clipped to the range the m
    computed levels actually cover.
    """
    if thetas is None:
        thetas = np.linspace(0.0, math.pi, 9)
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.size == 0:
        raise ContractError("need at least one quasimomentum")
    if thetas.min() < 0 or thetas.max() > math.pi + 1e-12:
        raise ContractError("quasimomenta must lie in [0, pi]")
    if np.abs(thetas).min() > 1e-12 or np.abs(thetas - math.pi).min() > 1e-12:
        raise ContractError("theta samples must include 0 and pi")
    if not lambda_max > 0:
        raise ContractError("lambda_max must be positive")
    if m < 1:
        raise SizeError("m must be >= 1")
    if potential is None:
        potential = PiecewisePotential.constant(0.0)
    mesh = build_mesh(geom, grading, z_breaks=potential.breakpoints)
    pair = assemble(mesh, potential)

    # masters: everything but the z = l_plus row, which folds onto z = l_minus
    n = mesh.n_nodes
    slave_row = mesh.base_id(mesh.nz - 1, np.arange(mesh.nx))
    master_row = mesh.base_id(0, np.arange(mesh.nx))
    is_slave = np.zeros(n, dtype=bool)
    is_slave[slave_row] = True
    new_index = np.full(n, -1, dtype=np.int64)
    keep = np.nonzero(~is_slave)[0]
    new_index[keep] = np.arange(keep.size)
    new_index[slave_row] = new_index[master_row]
    n_master = keep.size

    levels = np.empty((thetas.size, m))
    guess = None
    for it, theta in enumerate(thetas):
        k_emb = _fold_quasiperiodic(pair.k_mat, new_index, is_slave, theta,
                                    n_master)
        m_emb = _fold_quasiperiodic(pair.m_mat, new_index, is_slave, theta,
                                    n_master)
        papply = _tensor_precond(pair, theta=theta)
        try:
            # eigenvectors drift slowly along the quasimomentum sweep, so
            # the previous solution is an excellent starting block
            spec, guess = smallest_eigenpairs(k_emb, m_emb, 2 * m, tol,
                                              seed=seed, initial=guess,
                                              precond=papply)
        except Exception as exc:
            raise type(exc)(f"theta = {theta:.6f}: {exc}") from exc
        lo, hi = spec.values[0::2], spec.values[1::2]
        pair_tol = max(1e-9, 10.0 * tol) * (1.0 + np.abs(hi))
        if np.any(hi - lo > pair_tol):
            raise StructuralError(
                f"theta = {theta:.6f}: doubled-eigenvalue pairing spread "
                f"{float((hi - lo).max()):.3e} exceeds tolerance")
        levels[it] = 0.5 * (lo + hi)

    lam_top = min(float(lambda_max), float(levels[:, -1].min()))
    raw = [(float(levels[:, k].min()), float(levels[:, k].max()))
           for k in range(m)]
    clipped = [(lo, min(hi, lam_top)) for lo, hi in raw if lo <= lam_top]
    merged = _merge_bands(clipped, 1e-9)
    gaps = []
    for (_, hi_a), (lo_b, _) in zip(merged, merged[1:]):
        if lo_b > hi_a:
            gaps.append((hi_a, lo_b))
    if merged and merged[-1][1] < lam_top:
        gaps.append((merged[-1][1], lam_top))
    return BandStructure(tuple((lo, hi) for lo, hi in merged), tuple(gaps),
                         lam_top)
