"""Spectral theory of 1D Schrodinger operators with a point interaction.

Models -u'' + V u on a finite interval (l_minus, l_plus) with Neumann ends,
a point interaction at z = 0 (first-derivative jump for delta, value jump
proportional to the one-sided derivative for delta-prime), and a bounded
piecewise-constant potential V >= 0.  Also covers periodic lattices of the
same point interactions through the Floquet discriminant.

Eigenvalues come from two independent routes: transfer-matrix shooting with
bisection on the secular function, and a symmetric finite-difference pencil
with a doubled interface node solved by certified Sturm bisection.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BracketExhaustionError, ContractError, ResolutionError
from .linalg import Spectrum, tridiag_smallest_eigenvalues

DELTA_PRIME = "delta_prime"
DELTA = "delta"
NONE = "none"
NEUMANN_DECOUPLED = "neumann_decoupled"


@dataclass(frozen=True)
class PointInteraction:
    """Point condition at z = 0 acting on the state (u, u')."""

    kind: str
    strength: float = 0.0

    def __post_init__(self):
        if self.kind not in (DELTA_PRIME, DELTA, NONE, NEUMANN_DECOUPLED):
            raise ContractError(f"unknown interaction kind {self.kind!r}")
        if self.kind == DELTA_PRIME:
            if not self.strength >= 0:
                raise ContractError("delta-prime strength must be >= 0")
            if math.isinf(self.strength):
                # infinite jump strength decouples the halves exactly
                object.__setattr__(self, "kind", NEUMANN_DECOUPLED)
        if self.kind == DELTA and not math.isfinite(self.strength):
            raise ContractError("delta strength must be finite")

    @classmethod
    def delta_prime(cls, beta: float) -> "PointInteraction":
        return cls(DELTA_PRIME, float(beta))

    @classmethod
    def delta(cls, alpha: float) -> "PointInteraction":
        return cls(DELTA, float(alpha))

    @classmethod
    def none(cls) -> "PointInteraction":
        return cls(NONE)

    @classmethod
    def neumann_decoupled(cls) -> "PointInteraction":
        return cls(NEUMANN_DECOUPLED, math.inf)

    @property
    def decoupled(self) -> bool:
        return self.kind == NEUMANN_DECOUPLED


@dataclass(frozen=True)
class PiecewisePotential:
    """Piecewise-constant potential: values[i] on (breakpoints[i-1], breakpoints[i])."""

    breakpoints: tuple = ()
    values: tuple = (0.0,)

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        if len(vals) != len(bp) + 1:
            raise ContractError("need exactly one value per interval")
        if any(b1 <= b0 for b0, b1 in zip(bp, bp[1:])):
            raise ContractError("breakpoints must be strictly increasing")
        if not all(math.isfinite(b) for b in bp):
            raise ContractError("breakpoints must be finite")
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ContractError("potential values must be finite and >= 0")

    @classmethod
    def constant(cls, v: float = 0.0) -> "PiecewisePotential":
        return cls((), (float(v),))

    def value_at(self, z: float) -> float:
        i = int(np.searchsorted(np.asarray(self.breakpoints), z, side="right"))
        return self.values[i]

    def slabs(self, zl: float, zr: float):
        """Constant-value segments (z0, z1, v) covering [zl, zr]."""
        if not zr > zl:
            raise ContractError("slab query needs zr > zl")
        cuts = [zl] + [b for b in self.breakpoints if zl < b < zr] + [zr]
        return [(z0, z1, self.value_at(0.5 * (z0 + z1)))
                for z0, z1 in zip(cuts[:-1], cuts[1:])]

    @property
    def sup(self) -> float:
        return max(self.values)


@dataclass(frozen=True)
class PointModel1d:
    """Interval model: Neumann ends, point interaction at 0, potential V."""

    l_minus: float
    l_plus: float
    interaction: PointInteraction = field(default_factory=PointInteraction.none)
    potential: PiecewisePotential = field(default_factory=PiecewisePotential.constant)

    def __post_init__(self):
        if not (math.isfinite(self.l_minus) and math.isfinite(self.l_plus)):
            raise ContractError("interval ends must be finite")
        if not self.l_minus < 0 < self.l_plus:
            raise ContractError("need l_minus < 0 < l_plus")


@dataclass(frozen=True)
class TransferMatrix:
    """2x2 propagator acting on (u, u'); all constructors keep det = 1."""

    a: float
    b: float
    c: float
    d: float

    def det(self) -> float:
        return self.a * self.d - self.b * self.c

    def apply(self, u: float, du: float):
        return (self.a * u + self.b * du, self.c * u + self.d * du)

    def __matmul__(self, other: "TransferMatrix") -> "TransferMatrix":
        return TransferMatrix(
            self.a * other.a + self.b * other.c,
            self.a * other.b + self.b * other.d,
            self.c * other.a + self.d * other.c,
            self.c * other.b + self.d * other.d,
        )

    def as_array(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.c, self.d]])


def transfer_matrix_free(lam: float, length: float, v_const: float = 0.0) -> TransferMatrix:
    """Propagator of -u'' + v u = lam u over a constant-potential slab.

    Oscillatory for lam > v, hyperbolic for lam < v; the two branches meet
    in the polynomial limit, switched on for |lam - v| * length^2 scales
    below 1e-12 to keep entries continuous across the turning value.
    """
    k2 = lam - v_const
    a = length
    if abs(k2) < 1e-12:
        c = 1.0 - 0.5 * k2 * a * a
        s = a * (1.0 - k2 * a * a / 6.0)
    elif k2 > 0:
        k = math.sqrt(k2)
        c = math.cos(k * a)
        s = math.sin(k * a) / k
    else:
        kap = math.sqrt(-k2)
        c = math.cosh(kap * a)
        s = math.sinh(kap * a) / kap
    return TransferMatrix(c, s, -k2 * s, c)


def transfer_matrix_point(interaction: PointInteraction) -> TransferMatrix:
    """Jump matrix of the point condition (identity for no interaction)."""
    if interaction.decoupled:
        raise ContractError("decoupled model must not be propagated")
    if interaction.kind == DELTA_PRIME:
        return TransferMatrix(1.0, interaction.strength, 0.0, 1.0)
    if interaction.kind == DELTA:
        return TransferMatrix(1.0, 0.0, interaction.strength, 1.0)
    return TransferMatrix(1.0, 0.0, 0.0, 1.0)


def _propagate_state(u, du, slabs, lam):
    for z0, z1, v in slabs:
        mat = transfer_matrix_free(lam, z1 - z0, v)
        u, du = mat.apply(u, du)
        big = max(abs(u), abs(du))
        if big > 1e100:
            # roots of the secular function are scale invariant
            u, du = u / big, du / big
    return u, du


def secular_function(model: PointModel1d, lam: float) -> float:
    """u'(l_plus) after shooting (1, 0) from l_minus; zero iff eigenvalue."""
    if model.interaction.decoupled:
        raise ContractError("decoupled model dispatches to one-sided problems")
    u, du = _propagate_state(1.0, 0.0,
                             model.potential.slabs(model.l_minus, 0.0), lam)
    point = transfer_matrix_point(model.interaction)
    u, du = point.apply(u, du)
    u, du = _propagate_state(u, du,
                             model.potential.slabs(0.0, model.l_plus), lam)
    return du


_SCAN_CAP = 10 ** 6


def _bisect_root(f, lo, hi, flo, fhi, tol=1e-10):
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (flo < 0) != (fm < 0):
            hi, fhi = mid, fm
        else:
            lo, flo = mid, fm
    return 0.5 * (lo + hi)


def _scan_roots(f, lam_lo, step, count, budget):
    """First `count` sign-change roots of f on [lam_lo, inf), finest-first.

    Walks a lambda grid; each sign change is bisected to 1e-10.  Clusters
    (two roots within two base steps) trigger a x4 finer local rescan so
    near-degenerate pairs are not merged.
    """
    roots = []
    evals = 0

    def feval(x):
        nonlocal evals
        evals += 1
        if evals > budget:
            raise BracketExhaustionError(
                "secular scan exhausted its evaluation budget; "
                "fewer roots than requested below the reachable range, "
                "increase the scan budget or request fewer eigenvalues")
        return f(x)

    lam = lam_lo
    flam = feval(lam)
    while len(roots) < count:
        if flam == 0.0:
            if not roots or abs(lam - roots[-1]) > 1e-9:
                roots.append(lam)
            # step off the exact root so the next cell gets a signed sample
            lam = lam + step * 1e-3
            flam = feval(lam)
            continue
        nxt = lam + step
        fnxt = feval(nxt)
        if (flam < 0) != (fnxt < 0) or fnxt == 0.0:
            sub = np.linspace(lam, nxt, 5)
            fsub = [flam] + [feval(x) for x in sub[1:]]
            for (x0, x1), (f0, f1) in zip(zip(sub[:-1], sub[1:]),
                                          zip(fsub[:-1], fsub[1:])):
                if (f0 < 0) != (f1 < 0) or f1 == 0.0 or f0 == 0.0:
                    r = _bisect_root(feval, x0, x1, f0, f1)
                    if not roots or abs(r - roots[-1]) > 1e-9:
                        roots.append(r)
                if len(roots) >= count:
                    break
        lam, flam = nxt, fnxt
    return roots[:count], evals


def _neumann_eigenvalues(zl, zr, potential, count, budget=_SCAN_CAP):
    """Smallest eigenvalues of -u'' + V u with Neumann ends on (zl, zr)."""
    slab_list = potential.slabs(zl, zr)

    def shoot(lam):
        _, du = _propagate_state(1.0, 0.0, slab_list, lam)
        return du

    step = (math.pi / (zr - zl)) ** 2 / 8.0
    roots, evals = _scan_roots(shoot, -step, step, count, budget)
    return roots, evals


def eigenvalues_1d(model: PointModel1d, m: int) -> Spectrum:
    """m smallest eigenvalues by shooting + bisection (1e-10 brackets).

    The decoupled model merges the two one-sided Neumann spectra instead of
    shooting across the interface, so its exact double eigenvalues never
    depend on resolving degenerate secular roots.
    """
    if m < 1:
        raise ContractError("m must be >= 1")
    if model.interaction.decoupled:
        left, ev_l = _neumann_eigenvalues(model.l_minus, 0.0, model.potential, m)
        right, ev_r = _neumann_eigenvalues(0.0, model.l_plus, model.potential, m)
        vals = np.sort(np.concatenate([left, right]))[:m]
        return Spectrum(vals, np.full(m, 1e-10) / (1.0 + np.abs(vals)),
                        1e-10, True, ev_l + ev_r, "shooting")

    step = (math.pi / (model.l_plus - model.l_minus)) ** 2 / 8.0
    if model.interaction.kind == DELTA_PRIME and model.interaction.strength > 1.0:
        # near-decoupled pairs split by O(1/beta); keep several grid points
        # inside each split so both sign changes are seen
        step = min(step, 2.0 / model.interaction.strength)
    lam_lo = -step
    if model.interaction.kind == DELTA and model.interaction.strength < 0:
        alpha = -model.interaction.strength
        l_short = min(-model.l_minus, model.l_plus)
        lam_lo = -((alpha + 2.0 / l_short) ** 2) - 1.0 - step

    roots, evals = _scan_roots(lambda x: secular_function(model, x),
                               lam_lo, step, m, _SCAN_CAP)
    vals = np.array(roots)
    return Spectrum(vals, np.full(m, 1e-10) / (1.0 + np.abs(vals)),
                    1e-10, True, evals, "shooting")


def _fd_side_nodes(zl, zr, h, potential):
    """Uniform-ish nodes on [zl, zr] with potential breakpoints inserted."""
    n = max(int(round((zr - zl) / h)), 1)
    nodes = np.linspace(zl, zr, n + 1)
    inner = [b for b in potential.breakpoints if zl < b < zr]
    if inner:
        nodes = np.unique(np.concatenate([nodes, inner]))
        # drop near-duplicates so cell sizes stay O(h)
        keep = np.concatenate([[True], np.diff(nodes) > h / 4])
        keep[np.searchsorted(nodes, inner)] = True
        keep[0] = keep[-1] = True
        nodes = nodes[keep]
    cuts = [zl] + inner + [zr]
    for c0, c1 in zip(cuts[:-1], cuts[1:]):
        inside = np.count_nonzero((nodes >= c0 - 1e-14) & (nodes <= c1 + 1e-14))
        if inside - 1 < 8:
            raise ResolutionError(
                f"subinterval ({c0}, {c1}) resolved by {inside - 1} cells; "
                "need at least 8, reduce h")
    return nodes


def _fd_assemble_side(nodes, potential):
    """Lumped P1 pencil diagonals for one side: (kdiag, koff, mdiag)."""
    hs = np.diff(nodes)
    mids = 0.5 * (nodes[:-1] + nodes[1:])
    vcell = np.array([potential.value_at(z) for z in mids])
    n = nodes.size
    kdiag = np.zeros(n)
    koff = np.zeros(n - 1)
    mdiag = np.zeros(n)
    kdiag[:-1] += 1.0 / hs
    kdiag[1:] += 1.0 / hs
    koff -= 1.0 / hs
    half = 0.5 * hs
    mdiag[:-1] += half
    mdiag[1:] += half
    kdiag[:-1] += vcell * half
    kdiag[1:] += vcell * half
    return kdiag, koff, mdiag


def fd_eigenvalues_1d(model: PointModel1d, h: float, m: int) -> Spectrum:
    """m smallest eigenvalues of the finite-difference pencil at mesh size h.

    Symmetric lumped discretization, O(h^2) in the eigenvalues.  The point
    interaction enters through its quadratic form: a doubled node at z = 0
    carrying the coupling block (1/beta) [[1, -1], [-1, 1]] for the value
    jump, a diagonal bump alpha for the derivative jump, no coupling at all
    for the decoupled model, and a single shared node when the interaction
    is absent.  The resulting pencil is tridiagonal with diagonal mass, so
    the eigenvalues come from certified Sturm bisection in linalg.
    """
    if m < 1:
        raise ContractError("m must be >= 1")
    if not 0 < h < min(-model.l_minus, model.l_plus):
        raise ResolutionError("h must be positive and below the side lengths")
    left = _fd_side_nodes(model.l_minus, 0.0, h, model.potential)
    right = _fd_side_nodes(0.0, model.l_plus, h, model.potential)
    kl, kol, ml = _fd_assemble_side(left, model.potential)
    kr, kor, mr = _fd_assemble_side(right, model.potential)

    kind = model.interaction.kind
    if kind in (NONE, DELTA) or (kind == DELTA_PRIME
                                 and model.interaction.strength == 0.0):
        kdiag = np.concatenate([kl[:-1], [kl[-1] + kr[0]], kr[1:]])
        koff = np.concatenate([kol, kor])
        mdiag = np.concatenate([ml[:-1], [ml[-1] + mr[0]], mr[1:]])
        if kind == DELTA:
            kdiag[left.size - 1] += model.interaction.strength
    else:
        kdiag = np.concatenate([kl, kr])
        koff = np.concatenate([kol, [0.0], kor])
        mdiag = np.concatenate([ml, mr])
        if kind == DELTA_PRIME:
            w = 1.0 / model.interaction.strength
            kdiag[left.size - 1] += w
            kdiag[left.size] += w
            koff[left.size - 1] = -w

    if m > kdiag.size:
        raise ResolutionError("mesh too coarse for the requested mode count")
    scale = 1.0 / np.sqrt(mdiag)
    sd = kdiag * scale * scale
    so = koff * scale[:-1] * scale[1:]
    spec = tridiag_smallest_eigenvalues(sd, so, m, tol=1e-16)
    return Spectrum(spec.values, spec.residuals, spec.tol, spec.converged,
                    spec.iterations, "fd")


def floquet_discriminant(period: float, interaction: PointInteraction,
                         potential: PiecewisePotential, lam: float) -> float:
    """Trace of the one-period monodromy; |D| <= 2 marks spectral bands."""
    if not period > 0:
        raise ContractError("period must be positive")
    if interaction.decoupled:
        raise ContractError("decoupled lattice has point bands, no discriminant")
    mono = transfer_matrix_point(interaction)
    for z0, z1, v in potential.slabs(0.0, period):
        mono = mono @ transfer_matrix_free(lam, z1 - z0, v)
    return mono.a + mono.d


@dataclass(frozen=True)
class BandStructure:
    """Closed spectral bands and the open gaps between them, up to a cutoff."""

    bands: tuple
    gaps: tuple
    lambda_max: float

    def __post_init__(self):
        bands = tuple((float(l), float(r)) for l, r in self.bands)
        gaps = tuple((float(l), float(r)) for l, r in self.gaps)
        object.__setattr__(self, "bands", bands)
        object.__setattr__(self, "gaps", gaps)
        for l, r in bands:
            if r < l:
                raise ContractError("band interval reversed")
        for (l0, r0), (l1, r1) in zip(bands, bands[1:]):
            if l1 <= r0:
                raise ContractError("bands must be disjoint and ascending")
        for l, r in gaps:
            if r <= l:
                raise ContractError("gap interval must have positive length")


def _complement_gaps(bands, lambda_max):
    gaps = []
    for (_, r0), (l1, _) in zip(bands, bands[1:]):
        if l1 > r0:
            gaps.append((r0, l1))
    if bands and bands[-1][1] < lambda_max:
        gaps.append((bands[-1][1], lambda_max))
    return gaps


def kp_bands(period: float, interaction: PointInteraction,
             potential: PiecewisePotential, lambda_max: float) -> BandStructure:
    """Band/gap decomposition of the periodic lattice below lambda_max."""
    if not lambda_max > 0:
        raise ContractError("lambda_max must be positive")
    if interaction.decoupled:
        count = int(math.sqrt(lambda_max) * period / math.pi) + 3
        vals, _ = _neumann_eigenvalues(0.0, period, potential, count)
        pts = [v for v in vals if v <= lambda_max]
        bands = [(v, v) for v in pts]
        return BandStructure(tuple(bands),
                             tuple(_complement_gaps(bands, lambda_max)),
                             lambda_max)

    def disc(lam):
        return floquet_discriminant(period, interaction, potential, lam)

    step = (math.pi / period) ** 2 / 16.0
    beta = interaction.strength
    if interaction.kind == DELTA_PRIME and beta > 0:
        # high bands keep width ~ 8 / (period * beta) and the first gap
        # opens only ~ 2 beta pi^2 / period^3 wide; sample inside both
        step = min(step, 2.0 / (period * beta),
                   beta * math.pi ** 2 / period ** 3)
    if interaction.kind == DELTA and beta != 0:
        step = min(step, abs(beta) * math.pi / period ** 2)
    step = max(step, lambda_max / 2e5, 1e-9)
    lam_lo = 0.0
    if interaction.kind == DELTA and beta < 0:
        lam_lo = -(beta ** 2) - 1.0

    grid = np.concatenate([np.arange(lam_lo, lambda_max, step), [lambda_max]])
    fvals = np.array([disc(x) for x in grid])
    inside = np.abs(fvals) <= 2.0

    def edge(x0, x1):
        f = lambda x: abs(disc(x)) - 2.0
        return _bisect_root(f, x0, x1, f(x0), f(x1), tol=1e-9)

    bands = []
    i = 0
    while i < grid.size:
        if not inside[i]:
            i += 1
            continue
        j = i
        while j + 1 < grid.size and inside[j + 1]:
            j += 1
        lo = grid[i] if i == 0 else edge(grid[i - 1], grid[i])
        hi = grid[j] if j == grid.size - 1 else edge(grid[j], grid[j + 1])
        bands.append((max(lo, lam_lo), min(hi, lambda_max)))
        i = j + 1
    merged = []
    for b in bands:
        if merged and b[0] - merged[-1][1] <= 1e-9:
            merged[-1] = (merged[-1][0], b[1])
        else:
            merged.append(list(b))
    bands = [tuple(b) for b in merged]
    return BandStructure(tuple(bands),
                         tuple(_complement_gaps(bands, lambda_max)),
                         lambda_max)


def count_gaps(bands: BandStructure) -> int:
    """Number of positive-length gaps below the cutoff."""
    return sum(1 for l, r in bands.gaps if r > l and l < bands.lambda_max)


def band_structure_to_json(bs: BandStructure) -> str:
    return json.dumps({"bands": [list(b) for b in bs.bands],
                       "gaps": [list(g) for g in bs.gaps],
                       "lambda_max": bs.lambda_max}, indent=2)


def spectrum_to_json(spec: Spectrum) -> str:
    return json.dumps({"values": spec.values.tolist(),
                       "residuals": spec.residuals.tolist(),
                       "tol": spec.tol, "converged": spec.converged,
                       "method": spec.method}, indent=2)


def write_band_csv(bs: BandStructure, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "lower", "upper"])
        for l, r in bs.bands:
            writer.writerow(["band", repr(l), repr(r)])
        for l, r in bs.gaps:
            writer.writerow(["gap", repr(l), repr(r)])


def write_spectrum_csv(spec: Spectrum, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "value", "residual"])
        for i, (v, r) in enumerate(zip(spec.values, spec.residuals)):
            writer.writerow([i, repr(float(v)), repr(float(r))])
