"""Capacity of a small coupling window, three ways.

The window is a flat slit of half-width d*r centered in the unit ball.
Capacity comes from the leading-order asymptotics 2*pi/|ln d| (n = 2) or
d*cap(D) (n = 3), from the Dirichlet energy of the FEM-solved condenser
potential, and from the flux of that potential through the slit.  The same
module inverts the asymptotics to size a window realizing a target coupling
strength, subject to the thinness condition d <= eps.

The numeric solver works on a polar tensor mesh of the unit disk with the
slit on the horizontal axis.  Refinement bisects the tensor grid in index
space, placing new nodes at bilinear midpoints of the parent cells; the
children then tile the parents exactly, so the FEM spaces are nested, the
polygonal domain never changes, and the Dirichlet energy cannot increase
under refinement.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from ._fem import assemble_pair, quad_element_matrices
from .errors import ContractError, InfeasibleRegimeError, ResolutionError
from .linalg import CsrMatrix, cg_solve, csr_from_triplets


@dataclass(frozen=True)
class WindowSpec:
    """Scaled coupling window: slit (-d*r, d*r) for n = 2, scale d for n = 3."""

    n: int
    d: float
    r: float = 1.0
    cap_d_ref: float | None = None

    def __post_init__(self):
        if self.n not in (2, 3):
            raise ContractError("dimension must be 2 or 3")
        if not 0 < self.d <= 1:
            raise ContractError("window scale d must satisfy 0 < d <= 1")
        if self.n == 2 and not self.r > 0:
            raise ContractError("slit half-width factor r must be positive")
        if self.cap_d_ref is not None and not self.cap_d_ref > 0:
            raise ContractError("reference capacity must be positive")


def cap_asymptotic(spec: WindowSpec) -> float:
    """Leading-order capacity: 2*pi/|ln d| for n = 2, d*cap(D) for n = 3.

    The n = 2 form carries no shape constant; pass the slit's conformal
    radius as d (see slit_conformal_radius) when a sharp value is wanted.
    """
    if spec.n == 2:
        if spec.d >= 1:
            raise ContractError("2*pi/|ln d| needs d < 1 (log singularity)")
        return 2.0 * math.pi / abs(math.log(spec.d))
    if spec.cap_d_ref is None:
        raise ContractError("n = 3 asymptotics needs the reference capacity")
    return spec.d * spec.cap_d_ref


def slit_conformal_radius(half_width: float) -> float:
    """Conformal radius of a flat slit of half-width a, namely a/2.

    A disk of this radius has the same logarithmic capacity as the slit,
    which makes 2*pi/|ln(a/2)| the sharp small-slit capacity in the unit
    disk, versus the shape-blind leading term 2*pi/|ln a|.
    """
    if not half_width > 0:
        raise ContractError("half-width must be positive")
    return 0.5 * half_width


def gamma_eps(cap_val: float, mu_cross: float) -> float:
    """Coupling strength at finite thickness: capacity over cross-section measure."""
    if not (cap_val > 0 and mu_cross > 0):
        raise ContractError("capacity and cross-section measure must be positive")
    return cap_val / mu_cross


def window_for_gamma(gamma_target: float, eps: float, s_width: float,
                     n: int = 2, cap_d_ref: float | None = None) -> float:
    """Window scale d realizing the target coupling strength at thickness eps.

    Inverts the capacity asymptotics through gamma = cap / (eps * s_width):
    n = 2 gives d = exp(-2*pi/(gamma*eps*s_width)); n = 3 (s_width read as
    the cross-section area factor) gives d = gamma*eps^2*s_width/cap(D).
    """
    if not (gamma_target > 0 and eps > 0 and s_width > 0):
        raise ContractError("gamma, eps and s_width must be positive")
    if n == 2:
        d = math.exp(-2.0 * math.pi / (gamma_target * eps * s_width))
    elif n == 3:
        if cap_d_ref is None or not cap_d_ref > 0:
            raise ContractError("n = 3 inversion needs the reference capacity")
        d = gamma_target * eps * eps * s_width / cap_d_ref
    else:
        raise ContractError("dimension must be 2 or 3")
    if d > eps:
        raise InfeasibleRegimeError(
            f"window scale d = {d:.6g} exceeds eps = {eps:.6g}: "
            "the thin-window condition d_eps <= eps fails, "
            "reduce gamma_target or eps")
    return d


def _graded_widths(n: int, ratio: float, fine: str) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    if fine == "left":
        raw = ratio ** i
    elif fine == "right":
        raw = ratio ** i[::-1]
    else:  # fine at both ends
        raw = ratio ** np.minimum(i, i[::-1])
    return raw / raw.sum()


def _graded_points(x0: float, x1: float, n: int, ratio: float, fine: str):
    frac = np.concatenate([[0.0], np.cumsum(_graded_widths(n, ratio, fine))])
    frac[-1] = 1.0
    return x0 + (x1 - x0) * frac


@dataclass(frozen=True)
class CapacityMeshParams:
    """Polar mesh controls: cells across the slit, outside it, and per half-turn."""

    n_slit: int = 12
    n_outer: int = 18
    n_angular: int = 16
    ratio: float = 2.0
    level: int = 0

    def __post_init__(self):
        if min(self.n_slit, self.n_outer) < 1:
            raise ContractError("mesh cell counts too small")
        if self.n_angular < 4 or self.n_angular % 2:
            raise ContractError(
                "n_angular must be an even number >= 4 "
                "(flux stencil needs off-slit columns and a vertical axis)")
        if not self.ratio >= 1:
            raise ContractError("grading ratio must be >= 1")
        if self.level < 0:
            raise ContractError("level must be >= 0")


@dataclass(frozen=True)
class PolarSlitMesh:
    """Tensor mesh of the unit disk with a slit on the horizontal axis.

    pos[i, j] is the position of ring i, column j; ring 0 is the collapsed
    center (all columns at the origin).  Rings 1..slit_ring on columns
    col_zero / col_pi lie on the slit; the outermost ring is the zero
    boundary.  Quads are (ring, column) cells, degenerate at the center.
    """

    pos: np.ndarray
    slit_ring: int
    col_zero: int
    col_pi: int
    level: int = 0

    @property
    def rings(self) -> int:
        return self.pos.shape[0] - 1

    @property
    def cols(self) -> int:
        return self.pos.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.rings * self.cols + 1

    def node_id(self, ring, col):
        ring = np.asarray(ring)
        col = np.asarray(col)
        return np.where(ring == 0, 0, (ring - 1) * self.cols + col + 1)

    def node_positions(self) -> np.ndarray:
        out = np.empty((self.n_nodes, 2))
        out[0] = 0.0
        out[1:] = self.pos[1:].reshape(-1, 2)
        return out

    def quads(self) -> np.ndarray:
        i = np.arange(self.rings)[:, None]
        j = np.arange(self.cols)[None, :]
        jn = (j + 1) % self.cols
        corners = np.stack([self.node_id(i, j), self.node_id(i + 1, j),
                            self.node_id(i + 1, jn), self.node_id(i, jn)],
                           axis=-1)
        return corners.reshape(-1, 4)

    def dirichlet(self):
        """(mask, values): 1 on the slit, 0 on the outer ring."""
        mask = np.zeros(self.n_nodes, dtype=bool)
        vals = np.zeros(self.n_nodes)
        mask[0] = True
        vals[0] = 1.0
        rings = np.arange(1, self.slit_ring + 1)
        for col in (self.col_zero, self.col_pi):
            ids = self.node_id(rings, np.full_like(rings, col))
            mask[ids] = True
            vals[ids] = 1.0
        outer = self.node_id(np.full(self.cols, self.rings), np.arange(self.cols))
        mask[outer] = True
        return mask, vals

    def slit_cells_across(self) -> int:
        return self.slit_ring


def capacity_mesh(spec: WindowSpec, params: CapacityMeshParams) -> PolarSlitMesh:
    """Level-0 graded polar mesh for the slit of half-width spec.d * spec.r."""
    a = spec.d * spec.r
    if not a < 1:
        raise ContractError("slit must lie strictly inside the unit ball")
    rho_in = _graded_points(0.0, a, params.n_slit, params.ratio, "right")
    rho_out = _graded_points(a, 1.0, params.n_outer, params.ratio, "left")
    rho = np.concatenate([rho_in, rho_out[1:]])
    upper = _graded_points(0.0, math.pi, params.n_angular, params.ratio, "both")
    theta = np.concatenate([upper[:-1], math.pi + upper[:-1]])
    pos = rho[:, None, None] * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    pos[0] = 0.0
    mesh = PolarSlitMesh(pos, params.n_slit, 0, params.n_angular, 0)
    for _ in range(params.level):
        mesh = refine_capacity_mesh(mesh)
    return mesh


def refine_capacity_mesh(mesh: PolarSlitMesh) -> PolarSlitMesh:
    """Bisect the tensor grid; new nodes sit at bilinear cell midpoints."""
    pos = mesh.pos
    rings, cols = pos.shape[0], pos.shape[1]
    nxt = np.roll(pos, -1, axis=1)
    new = np.empty((2 * rings - 1, 2 * cols, 2))
    new[0::2, 0::2] = pos
    new[0::2, 1::2] = 0.5 * (pos + nxt)
    new[1::2, 0::2] = 0.5 * (pos[:-1] + pos[1:])
    new[1::2, 1::2] = 0.25 * (pos[:-1] + pos[1:] + nxt[:-1] + nxt[1:])
    return PolarSlitMesh(new, 2 * mesh.slit_ring, 2 * mesh.col_zero,
                         2 * mesh.col_pi, mesh.level + 1)


@dataclass(frozen=True)
class CapacityPotential:
    """Nodal condenser potential: 1 on the slit, 0 on the outer boundary."""

    mesh: PolarSlitMesh
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if vals.size != self.mesh.n_nodes:
            raise ContractError("potential length does not match the mesh")
        if vals.min() < -1e-12 or vals.max() > 1 + 1e-12:
            raise ContractError("potential violates the discrete maximum principle")


def _dirichlet_reduce(k_mat: CsrMatrix, mask: np.ndarray, vals: np.ndarray):
    """Eliminate pinned nodes: returns (K_ff, rhs_f, free_index)."""
    rows = np.repeat(np.arange(k_mat.nrows, dtype=np.int64),
                     np.diff(k_mat.row_offsets))
    cols = k_mat.col_indices
    v = k_mat.values
    free = ~mask
    new_index = np.cumsum(free) - 1
    ff = free[rows] & free[cols]
    k_ff = csr_from_triplets(int(free.sum()), int(free.sum()),
                             new_index[rows[ff]], new_index[cols[ff]],
                             v[ff], symmetric=True)
    fd = free[rows] & mask[cols]
    rhs = np.zeros(int(free.sum()))
    np.add.at(rhs, new_index[rows[fd]], -v[fd] * vals[cols[fd]])
    return k_ff, rhs, np.nonzero(free)[0]


def _slit_normal_derivative(mesh: PolarSlitMesh, u: np.ndarray, col: int,
                            step: int):
    """One-sided d(psi)/dz at z = 0- along one slit ray, O(h^2) in z."""
    below1 = (col + step) % mesh.cols
    below2 = (col + 2 * step) % mesh.cols
    rings = np.arange(1, mesh.slit_ring + 1)
    z1 = -mesh.pos[rings, below1, 1]
    z2 = -mesh.pos[rings, below2, 1]
    f1 = u[mesh.node_id(rings, np.full_like(rings, below1))]
    f2 = u[mesh.node_id(rings, np.full_like(rings, below2))]
    g = (z2 ** 2 * (1.0 - f1) - z1 ** 2 * (1.0 - f2)) / (z1 * z2 * (z2 - z1))
    x = mesh.pos[rings, col, 0]
    return x, g


def _center_normal_derivative(mesh: PolarSlitMesh, u: np.ndarray) -> float:
    col_down = (mesh.col_pi + mesh.col_pi // 2) % mesh.cols
    z1 = -mesh.pos[1, col_down, 1]
    z2 = -mesh.pos[2, col_down, 1]
    f1 = u[mesh.node_id(1, col_down)]
    f2 = u[mesh.node_id(2, col_down)]
    return float((z2 ** 2 * (1.0 - f1) - z1 ** 2 * (1.0 - f2))
                 / (z1 * z2 * (z2 - z1)))


def _slit_flux(mesh: PolarSlitMesh, u: np.ndarray) -> float:
    x_pos, g_pos = _slit_normal_derivative(mesh, u, mesh.col_zero, -1)
    x_neg, g_neg = _slit_normal_derivative(mesh, u, mesh.col_pi, +1)
    g0 = _center_normal_derivative(mesh, u)
    x = np.concatenate([x_neg[::-1], [0.0], x_pos])
    g = np.concatenate([g_neg[::-1], [g0], g_pos])
    return 2.0 * float(np.trapezoid(g, x))


def cap_numeric_2d(spec: WindowSpec,
                   params: CapacityMeshParams = CapacityMeshParams()):
    """FEM capacity of the slit: (energy, flux, potential).

    Solves the condenser problem on the graded polar mesh at params.level
    refinements, returns the Dirichlet energy and the slit flux, both of
    which estimate the capacity.
    """
    if spec.n != 2:
        raise ContractError("numeric solver covers n = 2 only")
    if params.n_slit * 2 ** params.level < 6:
        raise ResolutionError(
            "fewer than 6 elements across the slit; "
            "raise n_slit or the refinement level")
    mesh = capacity_mesh(spec, params)
    k_mat = assemble_pair(mesh.n_nodes, mesh.quads(),
                          quad_element_matrices(
                              mesh.node_positions()[mesh.quads()])[0])
    mask, vals = mesh.dirichlet()
    k_ff, rhs, free_idx = _dirichlet_reduce(k_mat, mask, vals)
    jac = k_ff.diagonal()
    u_f = cg_solve(k_ff, rhs, tol=1e-13, max_iter=40 * k_ff.nrows, precond=jac)
    u = vals.copy()
    u[free_idx] = u_f
    energy = float(u @ k_mat.matvec(u))
    flux = _slit_flux(mesh, u)
    return energy, flux, CapacityPotential(mesh, u)


def capacity_report(spec: WindowSpec, params: CapacityMeshParams,
                    levels: int = 3):
    """Refinement ladder rows for the CSV report."""
    rows = []
    for lvl in range(levels):
        energy, flux, _ = cap_numeric_2d(spec, replace(params, level=lvl))
        asym = cap_asymptotic(spec)
        rows.append({"d": spec.d, "r": spec.r, "mesh_level": lvl,
                     "cap_energy": energy, "cap_flux": flux,
                     "cap_asymptotic": asym,
                     "rel_gap": abs(energy - flux) / energy})
    return rows


def write_capacity_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["d", "r", "mesh_level", "cap_energy", "cap_flux",
                         "cap_asymptotic", "rel_gap"])
        for row in rows:
            writer.writerow([repr(row["d"]), repr(row["r"]), row["mesh_level"],
                             repr(row["cap_energy"]), repr(row["cap_flux"]),
                             repr(row["cap_asymptotic"]), repr(row["rel_gap"])])
