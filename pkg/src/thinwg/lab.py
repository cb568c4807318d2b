"""Convergence studies against the interval point-interaction limit.

Couples the 2D slit-waveguide solver to the solvable interval models:
per-thickness eigenvalue tables on the resolvent scale, Hausdorff
distances of resolvent spectra, rate-function fits, and band-gap
comparison of the periodic waveguide with its lattice limit.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .capacity import WindowSpec, cap_asymptotic, gamma_eps, window_for_gamma
from .errors import ContractError, InfeasibleRegimeError
from .linalg import Spectrum
from .solvable1d import (BandStructure, PiecewisePotential, PointInteraction,
                         PointModel1d, eigenvalues_1d, kp_bands)
from .waveguide import (MeshGrading, WaveguideGeometry, assemble, bloch_bands,
                        build_mesh, refine_mesh, solve_modes)

__all__ = [
    "StudyConfig", "ConvergenceRow", "StudyResult", "GapComparisonRow",
    "GapComparison", "rate_delta", "resolvent_map", "dist_out", "dist_in",
    "dist_hausdorff", "fit_rate", "convergence_study", "gap_comparison_study",
    "write_study_csv", "study_summary_json", "gap_report_json",
]

FINITE = "finite"
INFINITE = "infinite"


@dataclass(frozen=True)
class StudyConfig:
    """Geometry template plus the thickness sweep for one study.

    gamma = math.inf selects the free-limit design d = eps; finite gamma
    derives d(eps) from the window capacity asymptotics.  The limit model
    is the interval operator with a jump condition of strength 4/gamma
    (no interaction at gamma = inf).
    """

    l_minus: float
    l_plus: float
    s_a: float
    s_b: float
    r: float
    gamma: float
    eps_list: tuple
    potential: PiecewisePotential = field(
        default_factory=PiecewisePotential.constant)
    m: int = 5
    grading: MeshGrading = field(default_factory=MeshGrading)
    tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_list)
        object.__setattr__(self, "eps_list", eps)
        if len(eps) == 0:
            raise ContractError("eps_list must not be empty")
        if any(not 0 < e < 1 for e in eps):
            raise ContractError("every eps must lie in (0, 1)")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ContractError("eps_list must be strictly decreasing")
        if not self.gamma > 0:
            raise ContractError("gamma must be positive (math.inf allowed)")
        if self.m < 1:
            raise ContractError("need at least one tracked eigenvalue")

    @property
    def s_width(self) -> float:
        return self.s_b - self.s_a

    @property
    def interaction(self) -> PointInteraction:
        if math.isinf(self.gamma):
            return PointInteraction.none()
        return PointInteraction.delta_prime(4.0 / self.gamma)

    def window_scale(self, eps: float) -> float:
        """d(eps) for this design; InfeasibleRegimeError when d > eps."""
        if math.isinf(self.gamma):
            return eps
        return window_for_gamma(self.gamma, eps, self.s_width)


@dataclass(frozen=True)
class ConvergenceRow:
    """One thickness: eigenvalues, limit pairing and distance measures.

    values are 2-level Richardson extrapolations; mesh_estimate holds the
    per-mode Richardson error estimate on the eigenvalue scale.
    significant marks modes whose resolvent difference clears their own
    mesh-error bar by 10x; a difference below that is indistinguishable
    from discretization noise (modes whose limit eigenfunction has zero
    slope at the wall are exact on the slit domain at every thickness, so
    their true difference is 0).  mesh_limited marks rows whose mesh error
    (resolvent scale) exceeds a tenth of the smallest significant
    difference anywhere in the study, so rate checks should skip them.
    """

    eps: float
    d: float
    gamma_eps_val: float
    feasible: bool
    mesh_limited: bool
    values: np.ndarray
    mesh_estimate: np.ndarray
    limit_values: np.ndarray
    resolvent_diffs: np.ndarray
    significant: np.ndarray
    rate: float
    dist_out: float
    dist_in: float
    dist_h: float
    note: str = ""

    def __post_init__(self):
        if self.feasible:
            if np.any(self.resolvent_diffs < 0):
                raise ContractError("resolvent differences must be >= 0")
            if not self.dist_h == max(self.dist_out, self.dist_in):
                raise ContractError(
                    "Hausdorff distance must be the max of the one-sided ones")


@dataclass(frozen=True)
class StudyResult:
    config: StudyConfig
    rows: tuple
    limit_values: np.ndarray
    cutoff: float
    summary: dict


def rate_delta(eps: float, n: int, gamma_mode: str,
               gamma_eps_val: float = math.inf,
               v_term: float = 0.0) -> float:
    """Shape of the convergence-rate function (unit front constant).

    Finite coupling: eps^{1/2} |ln eps| in 2D, eps^{1/2} from dimension 3
    on.  Infinite coupling: eps^{1/2} + gamma_eps^{-1/2}, the second term
    measuring how fast the finite-thickness coupling blows up.  v_term is
    added verbatim (potential contribution, if the caller tracks one).
    """
    if not 0 < eps < 1:
        raise ContractError("eps must lie in (0, 1)")
    if n < 2:
        raise ContractError("dimension must be >= 2")
    if not v_term >= 0:
        raise ContractError("v_term must be >= 0")
    if gamma_mode == FINITE:
        base = math.sqrt(eps) * abs(math.log(eps)) if n == 2 else math.sqrt(eps)
    elif gamma_mode == INFINITE:
        if not gamma_eps_val > 0:
            raise ContractError("gamma_eps_val must be positive")
        base = math.sqrt(eps) + 1.0 / math.sqrt(gamma_eps_val)
    else:
        raise ContractError(f"unknown gamma_mode {gamma_mode!r}")
    return v_term + base


def _as_values(spec) -> np.ndarray:
    vals = spec.values if isinstance(spec, Spectrum) else spec
    return np.asarray(vals, dtype=np.float64)


def resolvent_map(spec, cutoff_d: float) -> np.ndarray:
    """Spectrum on the resolvent scale: {(lam+1)^-1} ∩ [cutoff_d, 1] ∪ {0}.

    Zero is always adjoined: it is the accumulation point of the image of
    any operator with spectrum running to +inf, so finite truncations stay
    comparable near the bottom of the resolvent scale.
    """
    vals = _as_values(spec)
    if vals.size == 0:
        raise ContractError("resolvent_map needs a nonempty spectrum")
    if not 0 < cutoff_d < 1:
        raise ContractError("cutoff must lie in (0, 1)")
    img = 1.0 / (1.0 + vals)
    img = img[(img >= cutoff_d) & (img <= 1.0 + 1e-15)]
    return np.unique(np.concatenate([img, [0.0]]))


def dist_out(x, y) -> float:
    """max over x of the distance to y (one-sided, 'outside' direction)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ContractError("distance of an empty set is undefined")
    return float(np.abs(x[:, None] - y[None, :]).min(axis=1).max())


def dist_in(x, y) -> float:
    """max over y of the distance to x (how much of y the set x misses)."""
    return dist_out(y, x)


def dist_hausdorff(x, y) -> float:
    return max(dist_out(x, y), dist_in(x, y))


def fit_rate(eps_list, err_list):
    """Least-squares slope of log err against log eps, with its r^2.

    Nonpositive errors carry no information on the log scale; they are
    dropped with a warning.  Fewer than three surviving points cannot fix
    a slope and an intercept meaningfully, so that is an error.
    """
    eps = np.asarray(eps_list, dtype=np.float64)
    err = np.asarray(err_list, dtype=np.float64)
    if eps.shape != err.shape:
        raise ContractError("eps and err lists must have equal length")
    keep = err > 0
    if not keep.all():
        warnings.warn(f"fit_rate: dropped {int((~keep).sum())} nonpositive "
                      "error value(s)", stacklevel=2)
    eps, err = eps[keep], err[keep]
    if eps.size < 3:
        raise ContractError("rate fit needs at least 3 positive error values")
    lx, ly = np.log(eps), np.log(err)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - float((resid ** 2).sum()) / ss_tot
    return float(slope), float(r2)


def _fit_constant(rates, errs):
    """Front constant C minimizing log-residuals of err = C * rate, and the
    worst per-point factor err / (C * rate)."""
    rates = np.asarray(rates, dtype=np.float64)
    errs = np.asarray(errs, dtype=np.float64)
    keep = (rates > 0) & (errs > 0)
    if not keep.any():
        return math.nan, math.nan
    c = float(np.exp(np.mean(np.log(errs[keep] / rates[keep]))))
    factor = float((errs[keep] / (c * rates[keep])).max())
    return c, factor


def _extrapolated_modes(geom: WaveguideGeometry, cfg: StudyConfig):
    """2-level Richardson: eigenvalues plus a mesh-error estimate per mode."""
    mesh = build_mesh(geom, cfg.grading,
                      z_breaks=cfg.potential.breakpoints)
    coarse, _ = solve_modes(assemble(mesh, cfg.potential), cfg.m,
                            tol=cfg.tol, seed=cfg.seed)
    fine_mesh = refine_mesh(mesh)
    fine, _ = solve_modes(assemble(fine_mesh, cfg.potential), cfg.m,
                          tol=cfg.tol, seed=cfg.seed)
    ext = (4.0 * fine.values - coarse.values) / 3.0
    est = np.abs(fine.values - coarse.values) / 3.0
    return ext, est


def convergence_study(cfg: StudyConfig) -> StudyResult:
    """Eigenvalue tables over the thickness sweep, against the interval limit.

    Per eps: derive the window scale, solve the slit waveguide with 2-level
    Richardson extrapolation, pair index-wise with the interval model of
    coupling strength 4/gamma, and measure one-sided/Hausdorff distances
    of the resolvent spectra above the cutoff (lam_m + 1)^{-1} / 2.
    Infeasible thicknesses stay in the table, flagged.  The summary fits
    a slope and a front constant per index over the clean rows.
    """
    model = PointModel1d(cfg.l_minus, cfg.l_plus, cfg.interaction,
                         cfg.potential)
    limit = eigenvalues_1d(model, cfg.m).values
    cutoff = 0.5 / (limit[-1] + 1.0)
    mode = INFINITE if math.isinf(cfg.gamma) else FINITE
    nan_vec = np.full(cfg.m, math.nan)

    raw = []
    for eps in cfg.eps_list:
        try:
            d = cfg.window_scale(eps)
            geom = WaveguideGeometry(cfg.l_minus, cfg.l_plus, eps, d,
                                     cfg.s_a, cfg.s_b, cfg.r)
        except (ContractError, InfeasibleRegimeError) as exc:
            raw.append(dict(eps=eps, d=math.nan, gamma_eps_val=math.nan,
                            feasible=False, values=nan_vec,
                            mesh_estimate=nan_vec, resolvent_diffs=nan_vec,
                            rate=math.nan, dist_out=math.nan,
                            dist_in=math.nan, dist_h=math.nan,
                            note=str(exc)))
            continue
        g_eps = gamma_eps(cap_asymptotic(WindowSpec(2, d)), eps * cfg.s_width)
        values, est = _extrapolated_modes(geom, cfg)
        rdiff = np.abs(1.0 / (values + 1.0) - 1.0 / (limit + 1.0))
        x = resolvent_map(values, cutoff)
        y = resolvent_map(limit, cutoff)
        d_out, d_in = dist_out(x, y), dist_in(x, y)
        raw.append(dict(eps=eps, d=d, gamma_eps_val=g_eps, feasible=True,
                        values=values, mesh_estimate=est,
                        resolvent_diffs=rdiff,
                        rate=rate_delta(eps, 2, mode, gamma_eps_val=g_eps),
                        dist_out=d_out, dist_in=d_in,
                        dist_h=max(d_out, d_in), note=""))

    feasible = [r for r in raw if r["feasible"]]
    if len(feasible) < 3:
        raise InfeasibleRegimeError(
            f"only {len(feasible)} of {len(raw)} thicknesses are feasible; "
            "a convergence study needs at least 3")

    # flag rows whose mesh error could mask the eps-trend: the floor is the
    # smallest difference that itself stands clear of its error bar
    for r in feasible:
        r["est_res"] = r["mesh_estimate"] / (r["values"] + 1.0) ** 2
        r["significant"] = r["resolvent_diffs"] > 10.0 * r["est_res"]
    sig_diffs = np.concatenate(
        [r["resolvent_diffs"][r["significant"]] for r in feasible])
    floor = float(sig_diffs.min()) if sig_diffs.size else math.inf
    rows = []
    for r in raw:
        limited = False
        sig = np.zeros(cfg.m, dtype=bool)
        if r["feasible"]:
            limited = bool(r["est_res"].max() > 0.1 * floor)
            sig = r["significant"]
        rows.append(ConvergenceRow(
            eps=r["eps"], d=r["d"], gamma_eps_val=r["gamma_eps_val"],
            feasible=r["feasible"], mesh_limited=limited,
            values=r["values"], mesh_estimate=r["mesh_estimate"],
            limit_values=limit.copy(), resolvent_diffs=r["resolvent_diffs"],
            significant=sig, rate=r["rate"], dist_out=r["dist_out"],
            dist_in=r["dist_in"], dist_h=r["dist_h"], note=r["note"]))

    clean = [r for r in rows if r.feasible and not r.mesh_limited]
    per_mode = []
    for k in range(cfg.m):
        entry = dict(slope=math.nan, r2=math.nan, c_fit=math.nan,
                     max_factor=math.nan, decreasing=None)
        errs = np.array([r.resolvent_diffs[k] for r in clean])
        sig = np.array([r.significant[k] for r in clean], dtype=bool)
        if errs.size >= 2:
            entry["decreasing"] = bool((np.diff(errs) < 0).all())
        if sig.sum() >= 3:
            eps_arr = np.array([r.eps for r in clean])
            entry["slope"], entry["r2"] = fit_rate(eps_arr[sig], errs[sig])
        if sig.any():
            rates = np.array([r.rate for r in clean])
            entry["c_fit"], entry["max_factor"] = _fit_constant(rates[sig],
                                                               errs[sig])
        per_mode.append(entry)
    # one constant across all modes, fitted on the significant points only
    pool_rates = np.concatenate(
        [np.full(int(r.significant.sum()), r.rate) for r in clean]) \
        if clean else np.empty(0)
    pool_errs = np.concatenate(
        [r.resolvent_diffs[r.significant] for r in clean]) \
        if clean else np.empty(0)
    c_pool, factor_pool = _fit_constant(pool_rates, pool_errs)
    summary = {
        "gamma": cfg.gamma,
        "mode": mode,
        "cutoff": cutoff,
        "n_rows": len(rows),
        "n_feasible": len(feasible),
        "n_mesh_limited": sum(1 for r in rows if r.mesh_limited),
        "per_mode": per_mode,
        "c_fit": c_pool,
        "max_factor": factor_pool,
        "dist_h_decreasing": bool(
            (np.diff([r.dist_h for r in clean]) < 0).all())
        if len(clean) >= 2 else None,
    }
    return StudyResult(cfg, tuple(rows), limit, cutoff, summary)


def interior_gaps(bs: BandStructure) -> tuple:
    """Gaps strictly between consecutive bands (never the trailing one up
    to the cutoff, which only reflects where the computed bands stop)."""
    out = []
    for (_, hi), (lo, _) in zip(bs.bands, bs.bands[1:]):
        if lo > hi:
            out.append((hi, lo))
    return tuple(out)


@dataclass(frozen=True)
class GapComparisonRow:
    """Bands of the 2D periodic waveguide at one thickness, matched
    index-wise against the lattice-limit gaps."""

    eps: float
    d: float
    bands: tuple
    gaps: tuple
    deviations: tuple   # (rel lo, rel hi) per matched gap index
    n_within: int


@dataclass(frozen=True)
class GapComparison:
    config: StudyConfig
    lambda_max: float
    rel_tol: float
    kp: BandStructure
    kp_gaps: tuple
    rows: tuple


def gap_comparison_study(cfg: StudyConfig, lambda_max: float,
                         thetas=None, rel_tol: float = 0.2) -> GapComparison:
    """Floquet bands of the thin periodic waveguide against the lattice limit.

    One period is (l_minus, l_plus) with the window at 0; the limit is the
    jump-condition lattice of the same period.  Gaps pair by band index and
    a gap counts as matched when both endpoints agree to rel_tol relative.
    """
    period = cfg.l_plus - cfg.l_minus
    kp = kp_bands(period, cfg.interaction, cfg.potential, lambda_max)
    ref_gaps = interior_gaps(kp)
    rows = []
    for eps in cfg.eps_list:
        d = cfg.window_scale(eps)
        geom = WaveguideGeometry(cfg.l_minus, cfg.l_plus, eps, d,
                                 cfg.s_a, cfg.s_b, cfg.r)
        bs = bloch_bands(geom, lambda_max, thetas=thetas, m=cfg.m,
                         potential=cfg.potential, grading=cfg.grading,
                         tol=cfg.tol, seed=cfg.seed)
        gaps = interior_gaps(bs)
        devs = []
        for (lo2, hi2), (lo1, hi1) in zip(gaps, ref_gaps):
            devs.append((abs(lo2 - lo1) / max(abs(lo1), 1e-12),
                         abs(hi2 - hi1) / max(abs(hi1), 1e-12)))
        n_within = sum(1 for lo, hi in devs if max(lo, hi) <= rel_tol)
        rows.append(GapComparisonRow(eps, d, bs.bands, gaps, tuple(devs),
                                     n_within))
    return GapComparison(cfg, float(lambda_max), rel_tol, kp, ref_gaps,
                         tuple(rows))


_STUDY_COLUMNS = ("eps", "d", "gamma_eps", "feasible", "mesh_limited",
                  "rate", "dist_out", "dist_in", "dist_h")


def write_study_csv(result: StudyResult, path) -> None:
    """One row per thickness; per-mode columns are suffixed _1.._m."""
    m = result.config.m
    header = list(_STUDY_COLUMNS)
    for tag in ("lam", "limit", "rdiff", "mesh_est"):
        header.extend(f"{tag}_{k + 1}" for k in range(m))
    header.append("note")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in result.rows:
            row = [repr(r.eps), repr(r.d), repr(r.gamma_eps_val),
                   int(r.feasible), int(r.mesh_limited), repr(r.rate),
                   repr(r.dist_out), repr(r.dist_in), repr(r.dist_h)]
            for arr in (r.values, r.limit_values, r.resolvent_diffs,
                        r.mesh_estimate):
                row.extend(repr(v) for v in arr.tolist())
            row.append(r.note)
            writer.writerow(row)


def study_summary_json(result: StudyResult) -> str:
    payload = dict(result.summary)
    payload["limit_values"] = result.limit_values.tolist()
    payload["eps"] = [r.eps for r in result.rows]
    return json.dumps(payload, indent=2, allow_nan=True)


def gap_report_json(report: GapComparison) -> str:
    return json.dumps({
        "lambda_max": report.lambda_max,
        "rel_tol": report.rel_tol,
        "kp_bands": [list(b) for b in report.kp.bands],
        "kp_gaps": [list(g) for g in report.kp_gaps],
        "rows": [{
            "eps": r.eps,
            "d": r.d,
            "bands": [list(b) for b in r.bands],
            "gaps": [list(g) for g in r.gaps],
            "deviations": [list(dv) for dv in r.deviations],
            "n_within": r.n_within,
        } for r in report.rows],
    }, indent=2)
