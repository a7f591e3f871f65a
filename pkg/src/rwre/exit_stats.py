"""Quenched exit statistics over environments: atypical exit tails, the
exit-point floor, direction gaps, transversal fluctuations and two-walk
intersections."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _core
from ._parallel import chunks, ordered_map
from ._stats import bootstrap, loglog_slope, wilson
from .environment import map_environments
from .errors import BadParameter, InsufficientData, NoDrift, RegionTooLarge
from .geometry import Block, Cone, DirectedBox, Free, Slab, axis_vector, tilde_proj_perp
from .multiscale import scale_R
from .solver import solve_exit
from .walk import estimate_direction, replica_seeds, run_replicas

log = logging.getLogger("rwre")

GEOMETRIES = ("slab", "box", "cone")


def _rows_to_csv(rows) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


# -- atypical exit tails -----------------------------------------------------


@dataclass
class ExitTailQuery:
    """Which exit probability to examine and the threshold e^{-c L^beta}.

    slab: U = {-L^beta <= x.l <= L} (``depth`` overrides L^beta);
    box: B_{L,l,K}; cone: C_L with opening ``delta`` along ``axis``.
    """

    geometry: str
    c: float
    beta: float
    L: float
    M: int
    l: tuple = None
    K: float = 1.0
    delta: float = 0.1
    axis: int = 0
    depth: float | None = None
    L_grid: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise BadParameter(f"geometry must be one of {GEOMETRIES}")
        if self.M < 1:
            raise BadParameter("M must be >= 1")
        if self.c <= 0 or not 0 < self.beta < 1:
            raise BadParameter("need c > 0 and beta in (0, 1)")

    def threshold(self, L=None) -> float:
        L = self.L if L is None else L
        return math.exp(-self.c * L ** self.beta)

    def region(self, d: int, L=None):
        L = self.L if L is None else L
        l = axis_vector(d) if self.l is None else self.l
        if self.geometry == "slab":
            depth = L ** self.beta if self.depth is None else self.depth
            return Slab(l, depth, L)
        if self.geometry == "box":
            return DirectedBox(l, L, self.K)
        return Cone(L, self.delta, axis=self.axis, d_=d)

    def to_dict(self):
        out = asdict(self)
        for k in ("l", "L_grid"):
            if out[k] is not None:
                out[k] = list(out[k])
        return out


@dataclass
class TailReport:
    query: dict
    threshold: float
    probabilities: np.ndarray  # right-exit probability per environment
    ci_half_width: np.ndarray  # zero for exact solves
    exact: bool
    below: np.ndarray  # probability <= threshold
    fraction: float
    fraction_ci: tuple
    seeds: list
    underflow: bool = False
    per_L: list = field(default_factory=list)  # (L, fraction) over L_grid
    alpha_hat: float | None = None

    def rows(self) -> list[dict]:
        return [{"replica": i, "env_seed": s, "probability": float(p), "below": int(b)}
                for i, (s, p, b) in enumerate(zip(self.seeds, self.probabilities, self.below))]

    def to_csv(self) -> str:
        return _rows_to_csv(self.rows())

    def summary(self) -> dict:
        return {"query": self.query, "threshold": self.threshold, "fraction": self.fraction,
                "fraction_ci": list(self.fraction_ci), "exact": self.exact,
                "underflow": self.underflow, "M": int(self.probabilities.size),
                "per_L": [list(x) for x in self.per_L], "alpha_hat": self.alpha_hat}

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def _right_exit(env, region, start, walks: int):
    """Exact right-exit probability, or a walk estimate when the solve is infeasible."""
    try:
        return solve_exit(env, region, start, field=False).right_mass, 0.0
    except RegionTooLarge:
        from .walk import simulate

        hits = 0
        for k in range(walks):
            tr = simulate(env, start, region, 10 ** 7, stream_id=k)
            hits += tr.stop_reason.value == "RightBoundary"
        lo, hi = wilson(hits, walks)
        return hits / walks, (hi - lo) / 2


def exit_probabilities(model, region, M: int, seed: int = 0, workers: int = 1,
                       walks: int = 1000):
    """Right-exit probability from the origin in M seeded environments.

    Environments sharing a kernel class (deterministic models, trap
    mixtures over a deterministic base) reuse one solve per class.
    """
    start = np.zeros(model.d, dtype=np.int64)
    seeds = replica_seeds(seed, "tails", range(M))
    res = map_environments(lambda env: _right_exit(env, region, start, walks), model, seeds,
                           workers)
    p = np.array([r[0] for r in res])
    half = np.array([r[1] for r in res])
    return seeds, p, half


def atypical_exit_tail(model, query: ExitTailQuery, workers: int = 1) -> TailReport:
    """Fraction of environments whose right-exit probability is <= e^{-c L^beta}."""
    d = model.d
    thr = query.threshold()
    underflow = thr == 0.0
    if underflow:
        warnings.warn("threshold e^{-c L^beta} underflows to 0; fraction is 0 by definition",
                      RuntimeWarning, stacklevel=2)
    seeds, p, half = exit_probabilities(model, query.region(d), query.M, query.seed, workers)
    below = (p <= thr) if not underflow else np.zeros(p.size, dtype=bool)
    k = int(below.sum())
    per_L = []
    alpha = None
    if query.L_grid:
        for L in query.L_grid:
            t = query.threshold(L)
            _, pl, _ = exit_probabilities(model, query.region(d, L), query.M, query.seed,
                                          workers)
            per_L.append((float(L), float(np.mean(pl <= t)) if t > 0 else 0.0))
        pts = [(L, f) for L, f in per_L if 0 < f < 1]
        if len(pts) >= 2:
            x, f = zip(*pts)
            alpha = loglog_slope(x, -np.log(f))
    return TailReport(query.to_dict(), thr, p, half, bool(np.all(half == 0)), below,
                      k / p.size, wilson(k, p.size), seeds, underflow, per_L, alpha)


# -- exit-point floor and variance window ------------------------------------


@dataclass
class ExitLaw:
    """Annealed exit law of a block from ``start``, averaged over M environments."""

    L: int
    start: tuple
    points: np.ndarray  # right-boundary exit points
    probs: np.ndarray  # annealed probability per point
    right_mass: float  # annealed right-exit probability
    M: int

    def table(self) -> dict:
        return {tuple(int(c) for c in p): float(q) for p, q in zip(self.points, self.probs)}

    def conditioned_variance(self) -> float:
        """Transversal variance of the law conditioned on a right exit."""
        q = self.probs / self.probs.sum()
        y = self.points[:, 1:].astype(float)
        mean = q @ y
        return float(q @ ((y - mean) ** 2).sum(axis=1))


def annealed_exit_law(model, L: int, M: int, start=None, seed: int = 0, workers: int = 1,
                      width: float | None = None, vhat=None, **solve_options) -> ExitLaw:
    """Average of exact quenched right-boundary exit laws of P(0, L)."""
    d = model.d
    block = Block((0,) * d, L, vhat=vhat, width=width)
    x = np.zeros(d, dtype=np.int64) if start is None else np.asarray(start, dtype=np.int64)
    if not block.in_middle_third(x)[0]:
        raise BadParameter("start must lie in the middle third of the block")
    solve_options.setdefault("field", False)
    solve_options.setdefault("method", "direct")
    # the walk is pushed along e_1: start from a forward window about 7 sd wide
    solve_options.setdefault("window", (x + np.array([-L] + [-10 * L] * (d - 1)),
                                        x + np.array([L * L] + [10 * L] * (d - 1))))

    def one(s):
        sol = solve_exit(model.sample(s), block, x, **solve_options)
        m = sol.exit_right
        return sol.exit_points[m], sol.exit_probs[m]

    seeds = replica_seeds(seed, "exit-law", range(M))
    parts = [one(seeds[0])] if model.is_deterministic else ordered_map(one, seeds, workers)
    acc: dict = {}
    for pts, probs in parts:
        for p, q in zip(map(tuple, pts.tolist()), probs):
            acc[p] = acc.get(p, 0.0) + float(q)
    keys = sorted(acc)
    n = len(parts)
    pts = np.array(keys, dtype=np.int64).reshape(-1, d)
    probs = np.array([acc[k] / n for k in keys])
    return ExitLaw(L, tuple(int(c) for c in x), pts, probs, float(probs.sum()), M)


@dataclass
class FloorReport:
    L: int
    C_prime: float
    floor: float  # min over admissible y of L^{d-1} P(y)
    argmin: tuple
    n_admissible: int
    right_mass: float
    variance: float  # conditioned transversal variance
    law: ExitLaw = field(repr=False)

    @property
    def scaled_variance(self) -> float:
        return self.variance / self.L ** 2

    def rows(self) -> list[dict]:
        return [{"y": " ".join(map(str, k)), "probability": v}
                for k, v in sorted(self.law.table().items())]

    def summary(self) -> dict:
        return {"L": self.L, "C_prime": self.C_prime, "floor": self.floor,
                "argmin": list(self.argmin), "n_admissible": self.n_admissible,
                "right_mass": self.right_mass, "variance": self.variance,
                "scaled_variance": self.scaled_variance}


def admissible(points, start, L: float, C_prime: float, vhat=None) -> np.ndarray:
    """||pi~_{v-perp}(y - x)||_1 < C' L."""
    d = points.shape[1]
    v = axis_vector(d) if vhat is None else np.asarray(vhat, dtype=float)
    t = tilde_proj_perp(points.astype(float) - np.asarray(start, dtype=float), v)
    return np.abs(t[:, 1:]).sum(axis=1) < C_prime * L


def exit_point_floor(model, L: int, M: int, C_prime: float = 1.0, start=None, seed: int = 0,
                     workers: int = 1, vhat=None, **solve_options) -> FloorReport:
    """min over admissible right-boundary y of L^{d-1} P-hat_x(X_T = y).

    Admissible points with zero annealed mass count (the floor is then 0).
    """
    d = model.d
    law = annealed_exit_law(model, L, M, start, seed, workers, vhat=vhat, **solve_options)
    block = Block((0,) * d, L, vhat=vhat)
    v = np.asarray(block.vhat)
    # every right-boundary site within the admissible window
    span = int(math.ceil(C_prime * L))
    base = np.asarray(law.start) + L * L * v / v[0]
    axes = [np.arange(int(math.floor(base[j])) - span, int(math.ceil(base[j])) + span + 1)
            for j in range(1, d)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d - 1)
    cand = np.column_stack([np.full(len(grid), L * L), grid]).astype(np.int64)
    cand = cand[admissible(cand, law.start, L, C_prime, block.vhat)]
    labels = block.labels(cand)
    cand = cand[labels == _core.RIGHT]
    table = law.table()
    vals = np.array([table.get(tuple(int(c) for c in y), 0.0) for y in cand])
    i = int(np.argmin(vals))
    return FloorReport(L, C_prime, float(L ** (d - 1) * vals[i]), tuple(int(c) for c in cand[i]),
                       int(len(cand)), law.right_mass, law.conditioned_variance(), law)


# -- direction gap -----------------------------------------------------------


@dataclass
class DirectionGap:
    L: int
    gap: float
    se: float
    ci: tuple
    v_emp: list
    v_L_emp: list
    n_used: int
    n_A_L: int

    def to_dict(self):
        return asdict(self)


def _gap(inc, in_a):
    ok = ~np.isnan(inc[:, 0])
    a = inc[ok].mean(axis=0)
    sel = ok & in_a
    if not sel.any():
        return math.nan
    b = inc[sel].mean(axis=0)
    return float(np.linalg.norm(a / np.linalg.norm(a) - b / np.linalg.norm(b)))


def direction_gap(model, L: int, M: int, horizon: int | None = None, seed: int = 0,
                  workers: int = 1, n_boot: int = 200) -> DirectionGap:
    """||v-hat_emp - v-hat_L_emp||_2 with a replica bootstrap."""
    if horizon is None:
        horizon = max(1000, 16 * L * L)
    est = estimate_direction(model, M, horizon, L=L, seed=seed, workers=workers)
    if not est.drift_detected:
        raise NoDrift("no drift detected")
    if est.v_L_emp is None:
        raise InsufficientData(f"A_L held in none of {M} replicas")
    inc, in_a = est.increments, est.in_A_L
    gap = _gap(inc, in_a)
    data = np.column_stack([inc, in_a.astype(float)])
    d = inc.shape[1]

    def stat(sample):
        return _gap(sample[:, :d], sample[:, d] > 0.5)

    lo, hi, se = bootstrap(data, lambda s: np.nan_to_num(stat(s), nan=2.0), n_boot, seed)
    return DirectionGap(L, gap, se, (lo, hi), list(est.v_emp), list(est.v_L_emp),
                        est.n_used, est.n_A_L)


# -- transversal fluctuations ------------------------------------------------


@dataclass
class FluctuationReport:
    L: int
    M: int
    R_transversal: int  # R_k(L) L
    R_backtrack: int  # R_2(L)
    transversal: float
    backtrack: float
    union: float
    censored: int

    def to_dict(self):
        return asdict(self)


def transversal_fluctuation_tail(model, L: int, M: int, start=None, seed: int = 0,
                                 workers: int = 1, vhat=None, k: int = 3,
                                 step_cap: int | None = None) -> FluctuationReport:
    """Frequency of F_{x,L} before the walk reaches (X - x).e_1 >= L^2.

    Sub-events: ||pi~_{v-perp}(X_n - x)||_inf >= R_k(L) L (k = 3 in F), and
    (X_n - x).e_1 < -R_2(L). One fresh environment per replica.
    """
    d = model.d
    x = np.zeros(d, dtype=np.int64) if start is None else np.asarray(start, dtype=np.int64)
    v = axis_vector(d) if vhat is None else np.asarray(vhat, dtype=float)
    r_t = scale_R(k, L, strict=False) * L
    r_b = scale_R(2, L, strict=False)
    cap = step_cap or 100 * L * L
    e1 = axis_vector(d)
    region = Slab(e1, 10 ** 9, float(x[0] + L * L))

    def job(rng):
        res = run_replicas(model, replica_seeds(seed, "fluctuation", rng), region, x, cap,
                           record=True)
        out = np.zeros((len(rng), 3), dtype=np.int64)
        for r in range(len(rng)):
            pos = _core.positions_from_moves(x, res.moves[r], int(res.steps[r])) - x
            t = tilde_proj_perp(pos.astype(float), v)
            trans = np.max(np.abs(t[:, 1:]), axis=1, initial=0.0) >= r_t
            back = pos[:, 0] < -r_b
            out[r] = (trans.any(), back.any(), res.labels[r] == _core.INTERIOR)
        return out

    flags = np.concatenate(ordered_map(job, chunks(M, 256), workers))
    tr, bk, cens = flags[:, 0] > 0, flags[:, 1] > 0, flags[:, 2] > 0
    return FluctuationReport(L, M, int(r_t), int(r_b), float(tr.mean()), float(bk.mean()),
                             float((tr | bk).mean()), int(cens.sum()))


# -- two-walk intersections --------------------------------------------------


@dataclass
class IntersectionReport:
    L: int
    M: int
    starts: tuple
    counts: np.ndarray
    threshold_unit: int  # R_2(L)^{d+1}
    tail: dict  # m -> P-hat(count > m R_2^{d+1})
    dimension_warning: bool

    def distribution(self) -> dict:
        ks, c = np.unique(self.counts, return_counts=True)
        return {int(k): int(v) for k, v in zip(ks, c)}

    def rows(self) -> list[dict]:
        return [{"count": k, "replicas": v} for k, v in sorted(self.distribution().items())]

    def summary(self) -> dict:
        return {"L": self.L, "M": self.M, "starts": [list(s) for s in self.starts],
                "threshold_unit": self.threshold_unit,
                "tail": {str(k): v for k, v in self.tail.items()},
                "dimension_warning": self.dimension_warning,
                "mean_count": float(self.counts.mean())}


def _visited(x, moves, n, block):
    pos = _core.positions_from_moves(x, moves, n)
    inside = block.labels(pos) == _core.INTERIOR
    return {tuple(p) for p in pos[inside].tolist()}


def intersection_census(model, L: int, M: int, starts, seed: int = 0, workers: int = 1,
                        m_grid=(1, 2, 3), step_cap: int | None = None,
                        stream_ids=(0, 1)) -> IntersectionReport:
    """|{X^(1)} cap {X^(2)} cap P(0, L)| for two walks in one environment per replica.

    Both walks run until they leave P(0, L) (or hit the step cap); visits
    are counted as distinct lattice points.
    """
    d = model.d
    x1, x2 = (np.asarray(s, dtype=np.int64) for s in starts)
    if x1[0] != 0 or x2[0] != 0:
        raise BadParameter("starts must lie on the hyperplane H_0")
    warn = d < 4
    if warn:
        log.warning("intersection census in d = %d < 4: decay claims assume d >= 4", d)
    block = Block((0,) * d, L)
    cap = step_cap or 100 * L * L

    def job(rng):
        seeds = replica_seeds(seed, "intersections", rng)
        a = run_replicas(model, seeds, block, x1, cap, record=True, stream_id=stream_ids[0])
        b = run_replicas(model, seeds, block, x2, cap, record=True, stream_id=stream_ids[1])
        out = np.zeros(len(rng), dtype=np.int64)
        for r in range(len(rng)):
            out[r] = len(_visited(x1, a.moves[r], int(a.steps[r]), block)
                         & _visited(x2, b.moves[r], int(b.steps[r]), block))
        return out

    counts = np.concatenate(ordered_map(job, chunks(M, 64), workers))
    unit = scale_R(2, L, strict=False) ** (d + 1)
    tail = {int(m): float(np.mean(counts > m * unit)) for m in m_grid}
    return IntersectionReport(L, M, (tuple(x1.tolist()), tuple(x2.tolist())), counts, unit,
                              tail, warn)
