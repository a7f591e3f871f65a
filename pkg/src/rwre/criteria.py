"""Ballisticity diagnostics: empirical (T)_gamma, regeneration tails, the
effective criterion and the band decomposition of E rho^a."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _core
from ._parallel import chunks, ordered_map
from ._stats import bootstrap, mean_ci
from .environment import map_environments
from .errors import BadParameter, InsufficientData, SpecInvalid
from .geometry import BoxSpec, Free, Region, Slab
from .solver import rho_of_box, solve_exit
from .walk import _record_from_positions, directional_report, replica_seeds, run_replicas

log = logging.getLogger("rwre")

CONSISTENT = "consistent_with_T_gamma"
INCONSISTENT = "inconsistent"
INCONCLUSIVE = "inconclusive"
HEAVY_TAIL_RATIO = 100.0
BOOTSTRAP_RESAMPLES = 1000


def _check_gamma(gamma):
    if not 0 < gamma < 1:
        raise BadParameter(f"gamma must lie in (0, 1), got {gamma}")


def _rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                        for k, v in r.items()})
    return buf.getvalue()


# -- (T)_gamma ---------------------------------------------------------------


@dataclass
class TGammaCell:
    L: float
    M: int
    count: int
    censored: int
    p_hat: float
    ci_low: float
    ci_high: float
    normalized: float | None  # L^-gamma log p_hat; None for zero counts
    norm_low: float | None  # None stands for -infinity
    norm_high: float | None


@dataclass
class TGammaReport:
    gamma: float
    l: tuple
    b: float
    L_grid: tuple
    cells: list
    trend_slope: float | None
    verdict: str

    def rows(self) -> list[dict]:
        return [dict(gamma=self.gamma, b=self.b, **asdict(c)) for c in self.cells]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["l"] = list(self.l)
        out["L_grid"] = list(self.L_grid)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self) -> str:
        return _rows_to_csv(self.rows())


def _tgamma_cell(rep, gamma) -> TGammaCell:
    n = rep.M - rep.censored
    scale = rep.L ** -gamma
    norm = scale * math.log(rep.estimate) if rep.count > 0 else None
    lo = scale * math.log(rep.ci_low) if rep.ci_low > 0 else None
    hi = scale * math.log(rep.ci_high) if rep.ci_high > 0 else None
    return TGammaCell(rep.L, n, rep.count, rep.censored, rep.estimate, rep.ci_low,
                      rep.ci_high, norm, lo, hi)


def tgamma_verdict(cells) -> str:
    """Verdict from 3-sigma intervals of the normalized values.

    inconsistent: some interval reaches 0, or the values increase
    significantly between consecutive scales (lower bound at L_{k+1} above
    the upper bound at L_k). consistent: every upper bound is negative and
    no significant increase. inconclusive: some scale had no usable walks.
    """
    if any(c.M == 0 for c in cells):
        return INCONCLUSIVE
    if any(c.norm_high is not None and c.norm_high >= 0 for c in cells):
        return INCONSISTENT
    for a, b in zip(cells, cells[1:]):
        if b.norm_low is not None and a.norm_high is not None and b.norm_low > a.norm_high:
            return INCONSISTENT
    return CONSISTENT


def t_gamma_estimate(model, l, b: float, gamma: float, L_grid, M: int, seed: int = 0,
                     workers: int = 1, step_cap: int = 10 ** 7) -> TGammaReport:
    """Empirical L^-gamma log P_0(T_L^l > T_bL^-l) over a grid of L."""
    _check_gamma(gamma)
    if b <= 0:
        raise BadParameter("b must be positive")
    L_grid = tuple(float(v) for v in L_grid)
    if not L_grid or any(y <= x for x, y in zip(L_grid, L_grid[1:])):
        raise BadParameter("L_grid must be nonempty and strictly increasing")
    cells = []
    for k, L in enumerate(L_grid):
        rep = directional_report(model, l, b, L, M, seed=seed + k, step_cap=step_cap,
                                 workers=workers)
        cells.append(_tgamma_cell(rep, gamma))
    pts = [(c.L, c.normalized) for c in cells if c.normalized is not None]
    slope = float(np.polyfit(*zip(*pts), 1)[0]) if len(pts) >= 2 else None
    return TGammaReport(gamma, tuple(rep.l), b, L_grid, cells, slope, tgamma_verdict(cells))


# -- regeneration tail -------------------------------------------------------


@dataclass
class TailMomentReport:
    gamma: float
    c: float
    M: int
    statistic: float
    ci_half_width: float
    n_uncensored: int
    censored: int
    histogram: dict  # radius -> count over uncensored replicas

    def to_dict(self):
        out = asdict(self)
        out["histogram"] = {str(k): v for k, v in sorted(self.histogram.items())}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def rows(self) -> list[dict]:
        return [{"radius": k, "count": v} for k, v in sorted(self.histogram.items())]

    def to_csv(self) -> str:
        return _rows_to_csv(self.rows())


def first_regeneration_radii(model, M: int, horizon: int, seed: int = 0,
                             confirm_horizon: int | None = None, workers: int = 1) -> np.ndarray:
    """X^{*(1)} per replica; -1 marks a replica without a confirmed first regeneration."""
    H = horizon // 2 if confirm_horizon is None else int(confirm_horizon)
    region = Free(model.d)
    start = np.zeros(model.d, dtype=np.int64)

    def job(rng):
        res = run_replicas(model, replica_seeds(seed, "regeneration", rng), region, start,
                           horizon, record=True)
        out = np.full(len(rng), -1, dtype=np.int64)
        for r in range(len(rng)):
            pos = _core.positions_from_moves(start, res.moves[r], int(res.steps[r]))
            rec = _record_from_positions(pos, H)
            if len(rec.times) and rec.confirmed[0]:
                out[r] = rec.radii[0]
        return out

    return np.concatenate(ordered_map(job, chunks(M, 256), workers))


def regeneration_tail(model, gamma: float, c: float, M: int, horizon: int, seed: int = 0,
                      confirm_horizon: int | None = None, workers: int = 1) -> TailMomentReport:
    """Truncated empirical mean of exp(c X^{*(1)}^gamma) over uncensored replicas."""
    _check_gamma(gamma)
    if c <= 0:
        raise BadParameter("c must be positive")
    if M < 1 or horizon < 1:
        raise BadParameter("M and horizon must be >= 1")
    radii = first_regeneration_radii(model, M, horizon, seed, confirm_horizon, workers)
    ok = radii[radii >= 0]
    if ok.size == 0:
        raise InsufficientData("no replica has a confirmed first regeneration")
    vals = np.exp(c * ok.astype(float) ** gamma)
    mean, half = mean_ci(vals)
    ks, cnt = np.unique(ok, return_counts=True)
    return TailMomentReport(gamma, c, M, mean, half, int(ok.size), int(M - ok.size),
                            {int(k): int(v) for k, v in zip(ks, cnt)})


# -- effective criterion -----------------------------------------------------


def criterion_box(L: int, Lt: float, R=None, d: int = 2) -> BoxSpec:
    """The box specification B(R, L-2, L+2, Lt) (axis aligned when R is None)."""
    if R is None:
        R = np.eye(d)
    return BoxSpec(R, L - 2, L + 2, Lt)


def criterion_slab(L: int, Lt: int, d: int = 2) -> Slab:
    """Slab-mode specification: depth L-2, level L+2, periodic width Lt."""
    e1 = np.zeros(d)
    e1[0] = 1.0
    return Slab(e1, L - 2, L + 2, transversal="periodic", width=int(Lt))


def spec_scales(spec: Region) -> tuple[float, float]:
    """(L, Lt) encoded by a criterion specification."""
    if isinstance(spec, BoxSpec):
        return float(spec.Lp - 2), float(spec.Lt)
    if isinstance(spec, Slab) and spec.transversal == "periodic":
        return float(spec.right_level - 2), float(spec.width)
    raise SpecInvalid("criterion spec must be a BoxSpec or a periodic Slab")


def criterion_prefactor(c1: float, kappa: float, d: int, L: float, Lt: float) -> float:
    return c1 * math.log(1 / kappa) ** (3 * (d - 1)) * Lt ** (d - 1) * L ** (3 * (d - 1) + 1)


@dataclass
class CriterionReport:
    spec: dict
    L: float
    Lt: float
    a: float
    M: int
    c1: float
    c2: float
    mean_rho_a: float
    ci_half_width: float
    prefactor: float
    value: float
    passed: bool
    heavy_tailed: bool = False
    median_rho_a: float | None = None
    bootstrap_ci: tuple | None = None
    rho: np.ndarray | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {"L": self.L, "Lt": self.Lt, "a": self.a, "M": self.M, "c1": self.c1,
                "c2": self.c2, "mean_rho_a": self.mean_rho_a,
                "ci_half_width": self.ci_half_width, "value": self.value,
                "pass": int(self.passed), "heavy_tailed": int(self.heavy_tailed)}

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "rho"}
        if self.bootstrap_ci is not None:
            out["bootstrap_ci"] = list(self.bootstrap_ci)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def sample_rho(model, spec: Region, M: int, seed: int = 0, workers: int = 1,
               **solve_options) -> np.ndarray:
    """rho of ``spec`` in M independently seeded environments (one solve per kernel class)."""
    seeds = replica_seeds(seed, "criterion", range(M))
    if model.is_deterministic:
        seeds = [seed] * M
    return np.array(map_environments(lambda env: rho_of_box(env, spec, **solve_options),
                                     model, seeds, workers))


def _validate_spec(d, L, Lt, a, c2):
    if not 0 <= a <= 1:
        raise SpecInvalid(f"a must lie in [0, 1], got {a}")
    if L < c2:
        raise SpecInvalid(f"L = {L} is below c2 = {c2}")
    if not 3 * math.sqrt(d) <= Lt < L ** 3:
        raise SpecInvalid(f"Lt = {Lt} outside [3 sqrt(d), L^3)")


def criterion_from_rho(rho, spec: Region, a: float, kappa: float, d: int, c1: float = 1.0,
                       c2: float = 4.0, seed: int = 0) -> CriterionReport:
    """Criterion report from precomputed rho samples."""
    L, Lt = spec_scales(spec)
    _validate_spec(d, L, Lt, a, c2)
    rho = np.asarray(rho, dtype=float)
    vals = np.power(rho, a)
    if np.all(vals == vals[0]):
        mean, half = float(vals[0]), 0.0
    else:
        mean, half = mean_ci(vals)
    pre = criterion_prefactor(c1, kappa, d, L, Lt)
    heavy = bool(mean > 0 and vals.max() / mean > HEAVY_TAIL_RATIO)
    med = boot = None
    if heavy:
        log.warning("heavy-tailed rho^a sample (max/mean = %.3g)", vals.max() / mean)
        med = float(np.median(vals))
        boot = bootstrap(vals, np.mean, BOOTSTRAP_RESAMPLES, seed)[:2]
    value = pre * mean
    return CriterionReport(spec.to_dict(), L, Lt, float(a), int(rho.size), c1, c2, mean,
                           half, pre, value, value + pre * half < 1, heavy, med, boot, rho)


def effective_criterion_evaluate(model, spec: Region, a: float, M: int, c1: float = 1.0,
                                 c2: float = 4.0, seed: int = 0, workers: int = 1,
                                 rho: np.ndarray | None = None, **solve_options) -> CriterionReport:
    """c1 (log 1/kappa)^{3(d-1)} Lt^{d-1} L^{3(d-1)+1} E-hat rho^a for one specification.

    ``spec`` is a :class:`BoxSpec` B(R, L-2, L+2, Lt) or a periodic slab
    (see :func:`criterion_box`, :func:`criterion_slab`). ``rho`` may pass
    precomputed samples (reused across several ``a``).
    """
    if M < 1:
        raise BadParameter("M must be >= 1")
    L, Lt = spec_scales(spec)
    _validate_spec(model.d, L, Lt, a, c2)
    if rho is None:
        rho = sample_rho(model, spec, M, seed, workers, **solve_options)
    return criterion_from_rho(rho, spec, a, model.kappa, model.d, c1, c2, seed)


def square_rule(L):
    return L * L


@dataclass
class CriterionSearch:
    best: CriterionReport
    reports: list

    @property
    def first_pass_L(self):
        ok = [r.L for r in self.reports if r.passed]
        return min(ok) if ok else None

    def rows(self) -> list[dict]:
        return [r.row() for r in self.reports]

    def to_csv(self) -> str:
        return _rows_to_csv(self.rows())

    def to_dict(self):
        return {"best": self.best.to_dict(), "first_pass_L": self.first_pass_L,
                "reports": self.rows()}


def effective_criterion_search(model, L_grid, a_grid=(), eps_grid=(0.5,), Lt_rule=square_rule,
                               M: int = 1, c1: float = 1.0, c2: float = 4.0, seed: int = 0,
                               workers: int = 1, slab: bool = False,
                               **solve_options) -> CriterionSearch:
    """Minimize the criterion over L, Lt = Lt_rule(L) and a in a_grid plus L^-eps."""
    L_grid = sorted(int(v) for v in L_grid)
    if not L_grid or not (a_grid or eps_grid):
        raise BadParameter("grids must be nonempty")
    reports = []
    for L in L_grid:
        Lt = Lt_rule(L)
        spec = criterion_slab(L, Lt, model.d) if slab else criterion_box(L, Lt, d=model.d)
        a_vals = sorted(set(float(a) for a in a_grid) | {float(L) ** -e for e in eps_grid})
        rho = None
        for a in a_vals:
            rep = effective_criterion_evaluate(model, spec, a, M, c1, c2, seed, workers,
                                               rho=rho, **solve_options)
            rho = rep.rho
            reports.append(rep)
    best = min(reports, key=lambda r: (r.value, r.L, r.a))
    return CriterionSearch(best, reports)


# -- band decomposition ------------------------------------------------------


@dataclass
class BandDecomposition:
    gamma: float
    L: float
    eps: float
    a: float
    betas: tuple
    ks: tuple
    thresholds: tuple  # e^{-k_j L^{beta_j}}, j = 1..n
    masses: tuple  # E-hat_0 .. E-hat_n
    counts: tuple
    total: float  # band-ordered sum of the masses
    mean_rho_a: float  # plain mean of rho^a over the sample
    delta1_estimate: float | None  # finite-L value of -L^-gamma log(1 - mean h)
    M: int

    def rows(self) -> list[dict]:
        return [{"band": j, "count": c, "mass": m} for j, (c, m) in
                enumerate(zip(self.counts, self.masses))]

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self):
        return _rows_to_csv(self.rows())


def band_index(h: float, thresholds) -> int:
    """0 if h > t_1, j if t_{j+1} < h <= t_j, n if h <= t_n."""
    j = 0
    for t in thresholds:
        if h <= t:
            j += 1
        else:
            break
    return j


def rho_band_decomposition(samples, gamma: float, betas, ks, eps: float, L: float
                           ) -> BandDecomposition:
    """Split E-hat rho^a (a = L^-eps) by the right-exit probability h of each sample."""
    _check_gamma(gamma)
    betas = tuple(float(b) for b in betas)
    ks = tuple(float(k) for k in ks)
    if len(betas) != len(ks) or not betas:
        raise BadParameter("betas and ks must have the same nonzero length")
    if betas[0] != gamma or betas[-1] != 1.0 or any(y <= x for x, y in zip(betas, betas[1:])):
        raise BadParameter("need gamma = beta_1 < ... < beta_n = 1")
    if any(k <= 0 for k in ks):
        raise BadParameter("all k_j must be positive")
    if not 0 < eps < 1:
        raise BadParameter("eps must lie in (0, 1)")
    thr = tuple(math.exp(-k * L ** b) for k, b in zip(ks, betas))
    if any(y >= x for x, y in zip(thr, thr[1:])):
        raise BadParameter("thresholds e^{-k_j L^beta_j} must be strictly decreasing")
    samples = [(float(h), float(r)) for h, r in samples]
    if not samples:
        raise InsufficientData("empty sample")
    M = len(samples)
    a = float(L) ** -eps
    n = len(thr)
    sums = [0.0] * (n + 1)
    counts = [0] * (n + 1)
    for h, r in samples:
        j = band_index(h, thr)
        sums[j] += r ** a
        counts[j] += 1
    masses = tuple(s / M for s in sums)
    total = 0.0
    for m in masses:
        total += m
    mean = float(np.mean([r ** a for _, r in samples]))
    miss = 1.0 - float(np.mean([h for h, _ in samples]))
    d1 = -L ** -gamma * math.log(miss) if miss > 0 else None
    return BandDecomposition(gamma, float(L), eps, a, betas, ks, thr, masses, tuple(counts),
                             total, mean, d1, M)


def sample_h_rho(model, spec: Region, M: int, seed: int = 0, workers: int = 1,
                 **solve_options) -> list[tuple[float, float]]:
    """(h, rho) pairs of ``spec`` from the origin over M seeded environments."""
    start = np.zeros(model.d, dtype=np.int64)
    solve_options.setdefault("field", False)

    def one(env):
        sol = solve_exit(env, spec, start, **solve_options)
        right = sol.right_mass
        return right, (sol.wrong_mass / right if right > 0 else math.inf)

    return map_environments(one, model, replica_seeds(seed, "bands", range(M)), workers)
