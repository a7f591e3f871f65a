"""Scale functions, scale ladders, blocks on sublattices and good/bad blocks."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import mpmath
import numpy as np

from . import _core
from ._parallel import chunks, ordered_map
from .environment import Environment, derive_seed
from .errors import BadParameter, DegenerateLadder, ReferenceMismatch, RegionTooLarge
from .geometry import Block, Cone, Region
from .solver import block_fields
from .walk import StopReason, simulate


def _ceil_exp_power(base_loglog: float, k: int, N: int) -> int:
    expo = base_loglog ** (k + 1)
    if expo > 700:  # beyond float range: exact ceiling at a precision covering every digit
        with mpmath.workdps(int(expo / 2.302585) + 30):
            return int(mpmath.ceil(mpmath.exp(mpmath.log(mpmath.log(N)) ** (k + 1))))
    val = math.exp(expo)
    nearest = round(val)
    if abs(val - nearest) < 1e-9 * max(1.0, val):
        with mpmath.workdps(50 + int(expo / 2.302585)):
            exact = mpmath.exp(mpmath.log(mpmath.log(N)) ** (k + 1))
            return int(mpmath.ceil(exact))
    return int(math.ceil(val))


def scale_R(k: int, N: int, strict: bool = True) -> int:
    """R_k(N) = ceil(exp((log log N)^{k+1})).

    Values within 1e-9 (relative) of an integer are re-evaluated at 50
    digits. ``strict=False`` admits 3 <= N < 16, where R is no longer
    increasing in ``k``; block geometry at small N uses it.
    """
    if k < 1 or int(k) != k:
        raise BadParameter("k must be a positive integer")
    if N < 16 and (strict or N < 3):
        raise BadParameter("scale_R requires N >= 16")
    return _ceil_exp_power(math.log(math.log(N)), int(k), int(N))


# -- parameters and ladders --------------------------------------------------


@dataclass(frozen=True)
class LadderParams:
    """Exponents of the multiscale scheme.

    ``gamma`` is the (T)_gamma exponent used in the exit threshold of
    the good-block condition. In ``"regime"`` mode the regime constraints are
    enforced and theta must equal chi; ``"explicit"`` mode takes the first
    level ``L1`` and multiplier ``m`` from the caller.
    """

    alpha: float
    beta: float
    delta: float
    psi: float
    chi: float
    theta: float
    gamma: float = 0.5
    mode: str = "explicit"
    L1: int | None = None
    m: int | None = None
    d: int = 2

    def __post_init__(self):
        if self.mode not in ("regime", "explicit"):
            raise BadParameter("mode must be 'regime' or 'explicit'")
        if not (0 < self.gamma < 1):
            raise BadParameter("gamma must lie in (0, 1)")
        if not (0 < self.theta <= 1):
            raise BadParameter("theta must lie in (0, 1]")
        if self.mode == "regime":
            self.check_regime()
        elif self.L1 is None or self.m is None:
            raise BadParameter("explicit mode needs L1 and m")

    def regime_violations(self) -> list[str]:
        a, b, dl, psi, chi, d = self.alpha, self.beta, self.delta, self.psi, self.chi, self.d
        out = []
        if not (0 < dl < (b * d - a) / (12 * d)):
            out.append("0 < delta < (beta d - alpha)/(12 d)")
        if not (2 * dl < psi < 20 * dl / 9):
            out.append("psi in (2 delta, 20 delta / 9)")
        if not (0 < chi < min((b - 6 * dl) / 2, psi / 4, 6 / (d - 1))):
            out.append("0 < chi < min((beta - 6 delta)/2, psi/4, 6/(d-1))")
        if self.theta != chi:
            out.append("theta = chi")
        return out

    def check_regime(self):
        bad = self.regime_violations()
        if bad:
            raise BadParameter("parameter regime violated: " + "; ".join(bad))

    def thresholds(self, N: int) -> tuple[float, float, float]:
        """(exit, expectation, hypercube) thresholds at scale N."""
        d, th = self.d, self.theta
        t1 = math.exp(-scale_R(1, N) ** self.gamma)
        t2 = float(scale_R(4, N))
        t3 = float(N) ** ((th - 1) * (d - 1) - th * (d - 1) / (d + 1))
        return t1, t2, t3

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class ScaleLadder:
    L: int
    levels: tuple
    m: int
    iota: int

    def to_dict(self):
        return {"L": self.L, "levels": list(self.levels), "m": self.m, "iota": self.iota}


def build_ladder(L: int, params: LadderParams) -> ScaleLadder:
    """Levels L_1 < ... < L_iota with L_{k+1} = m L_k, stopping at the first
    level whose square exceeds L^{1 + delta}."""
    if params.mode == "regime":
        l1 = int(math.floor(L ** params.psi))
        m = int(math.floor(L ** params.chi))
    else:
        l1, m = int(params.L1), int(params.m)
    if m <= 1:
        raise DegenerateLadder(f"multiplier {m} <= 1 at L={L}")
    if l1 < 1:
        raise DegenerateLadder(f"first level {l1} < 1 at L={L}")
    target = float(L) ** (1 + params.delta)
    levels = [l1]
    while levels[-1] ** 2 <= target:
        levels.append(levels[-1] * m)
    return ScaleLadder(int(L), tuple(levels), m, len(levels))


# -- blocks on the sublattice ------------------------------------------------


def lattice_spacing(N: int, d: int) -> np.ndarray:
    """Spacings of L_N = N^2 Z x floor(R_6(N) N / 4) Z^{d-1}."""
    return np.array([N * N] + [scale_R(6, N, strict=False) * N // 4] * (d - 1), dtype=np.int64)


def window_points(window: Region) -> np.ndarray:
    lo, hi = window.bbox()
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise BadParameter("window must be bounded")
    lo = lo.astype(np.int64)
    shape = (hi - lo + 1).astype(np.int64)
    if np.any(shape <= 0):
        return np.zeros((0, window.d), dtype=np.int64)
    code, rp = window.encode()
    lab = _core.labels_on_box(code, rp, lo, shape)
    flat = np.flatnonzero(lab == _core.INTERIOR)
    return np.stack(np.unravel_index(flat, tuple(shape)), axis=-1) + lo


def enumerate_blocks(N: int, window: Region, vhat=None) -> list[tuple]:
    """Anchors x in L_N whose block P(x, N) meets ``window``, lexicographic."""
    if N < 16:
        raise BadParameter("blocks require N >= 16")
    pts = window_points(window)
    d = window.d
    if len(pts) == 0:
        return []
    v = np.asarray(Block((0,) * d, N, vhat).vhat)
    sp = lattice_spacing(N, d)
    width = scale_R(6, N) * N
    n2 = N * N
    anchors = set()
    y1 = pts[:, 0]
    for off in (0, 1):
        x1 = (np.floor_divide(y1, n2) + off) * n2
        s = y1 - x1
        ok = (s > -n2) & (s < n2)
        if not ok.any():
            continue
        sel_pts, sel_x1, sel_s = pts[ok], x1[ok], s[ok].astype(float)
        ranges = []
        for i in range(1, d):
            c = sel_pts[:, i] - sel_s / v[0] * v[i]
            # x_i in (c - width, c + width) on the lattice sp[i] Z
            kmin = np.floor((c - width) / sp[i]).astype(np.int64) + 1
            kmax = np.ceil((c + width) / sp[i]).astype(np.int64) - 1
            ranges.append((kmin, kmax))
        keys = np.unique(np.stack([sel_x1] + [r[0] for r in ranges] + [r[1] for r in ranges],
                                  axis=1), axis=0)
        for row in keys:
            lists = [range(int(row[1 + i]), int(row[d + i]) + 1) for i in range(d - 1)]
            for combo in itertools.product(*lists):
                anchors.add((int(row[0]),) + tuple(int(k * sp[1 + i]) for i, k in enumerate(combo)))
    return sorted(anchors)


# -- annealed reference ------------------------------------------------------


def middle_third_sites(block: Block, budget: int) -> tuple[np.ndarray, str]:
    """Middle-third sites relative to the anchor, subsampled when over budget."""
    pts = block.middle_third_points() - np.asarray(block.anchor)
    if len(pts) <= budget:
        return pts, "all"
    step = int(math.ceil(len(pts) / budget))
    return pts[::step], f"every {step}th middle-third site in lexicographic order"


@dataclass
class AnnealedReference:
    N: int
    theta: float
    vhat: tuple
    fingerprint: str
    sites: np.ndarray  # (n, d) offsets from the anchor
    site_policy: str
    cube_side: int
    cube_keys: list
    p_right: np.ndarray  # (n,)
    expectation: np.ndarray  # (n, d) conditioned, anchor-relative
    expectation_ci: np.ndarray
    cubes: np.ndarray  # (n, n_cubes) conditioned
    cubes_ci: np.ndarray
    M: int
    exact: bool
    fallback: bool = False

    def at_center(self) -> int:
        """Row index of the anchor itself."""
        hits = np.flatnonzero(np.all(self.sites == 0, axis=1))
        return int(hits[0]) if len(hits) else -1

    def to_dict(self):
        c = self.at_center()
        return {"N": self.N, "theta": self.theta, "vhat": list(self.vhat), "M": self.M,
                "exact": self.exact, "fallback": self.fallback, "n_sites": len(self.sites),
                "site_policy": self.site_policy, "cube_side": self.cube_side,
                "center_expectation": self.expectation[c].tolist() if c >= 0 else None,
                "center_expectation_ci": self.expectation_ci[c].tolist() if c >= 0 else None,
                "max_expectation_ci": float(self.expectation_ci.max(initial=0.0)),
                "max_cube_ci": float(self.cubes_ci.max(initial=0.0))}


class _RatioAccumulator:
    """Running sums for ratio-of-means estimates with delta-method CIs."""

    def __init__(self, shape_num, n):
        self.m = 0
        self.sn = np.zeros(shape_num)
        self.sn2 = np.zeros(shape_num)
        self.snd = np.zeros(shape_num)
        self.sd = np.zeros(n)
        self.sd2 = np.zeros(n)

    def add(self, num, den):
        self.m += 1
        self.sn += num
        self.sn2 += num * num
        self.snd += num * den[:, None]
        self.sd += den
        self.sd2 += den * den

    def result(self, z=1.96):
        m = self.m
        nbar = self.sn / m
        dbar = self.sd / m
        with np.errstate(divide="ignore", invalid="ignore"):
            r = nbar / dbar[:, None]
            if m < 2:
                return r, np.zeros_like(r)
            vn = (self.sn2 - m * nbar ** 2) / (m - 1)
            vd = (self.sd2 - m * dbar ** 2) / (m - 1)
            cov = (self.snd - m * nbar * dbar[:, None]) / (m - 1)
            var = np.maximum(vn + r ** 2 * vd[:, None] - 2 * r * cov, 0.0)
            half = z * np.sqrt(var / m) / np.abs(dbar[:, None])
        return r, half


def _fields_at_sites(env, block, theta, sites, method="direct"):
    f = block_fields(env, block, theta, anchor=block.anchor, method=method)
    rows = f.at(sites + np.asarray(block.anchor))
    return f, rows


def annealed_reference(model, N: int, theta: float, vhat=None, M: int = 100, seed: int = 0,
                       site_budget: int = 10_000, workers: int = 1,
                       max_sites: int = 2_000_000, walks_per_site: int = 32) -> AnnealedReference:
    """Annealed conditioned exit laws of P(0, N) from every tested site.

    Per environment the block is solved exactly; numerators E[Y 1_right]
    and denominators P(right) are averaged separately and their ratio is
    the annealed conditioned law, with delta-method 95% half widths.
    Deterministic models need a single solve and get zero-width intervals.
    Blocks over ``max_sites`` fall back to walk simulation (flagged).
    """
    if M < 100 and not getattr(model, "is_deterministic", False):
        raise BadParameter("annealed reference needs M >= 100")
    d = model.d
    block = Block((0,) * d, N, vhat)
    sites, policy = middle_third_sites(block, site_budget)
    from .solver import cube_side as _side

    side = _side(float(N), theta)
    try:
        grid_cells = np.prod(block.bbox()[1] - block.bbox()[0] + 3)
        if grid_cells > 20 * max_sites:
            raise RegionTooLarge("block too large")
        if getattr(model, "is_deterministic", False):
            f, rows = _fields_at_sites(model.sample(seed), block, theta, sites)
            p = rows[:, 0]
            exp = rows[:, 1:1 + d] / p[:, None]
            cubes = rows[:, 1 + d:] / p[:, None]
            return AnnealedReference(N, theta, block.vhat, model.fingerprint, sites, policy,
                                     f.side, f.cube_keys, p, exp, np.zeros_like(exp), cubes,
                                     np.zeros_like(cubes), M, True)

        def job(i):
            env = model.sample(derive_seed(seed, "annealed", i))
            f, rows = _fields_at_sites(env, block, theta, sites)
            return f.cube_keys, rows

        keys = None
        acc = None
        for batch in chunks(M, max(1, workers)):
            for cube_keys, rows in ordered_map(job, batch, workers):
                if acc is None:
                    keys = cube_keys
                    acc = _RatioAccumulator(rows[:, 1:].shape, len(sites))
                acc.add(rows[:, 1:], rows[:, 0])
        ratio, half = acc.result()
        p = acc.sd / acc.m
        return AnnealedReference(N, theta, block.vhat, model.fingerprint, sites, policy, side,
                                 keys, p, ratio[:, :d], half[:, :d], ratio[:, d:], half[:, d:],
                                 M, False)
    except RegionTooLarge:
        return _simulated_reference(model, block, theta, side, sites, policy, M, seed,
                                    walks_per_site)


def _simulated_reference(model, block, theta, side, sites, policy, M, seed, walks_per_site):
    from .solver import cube_index

    d = model.d
    if len(sites) > 64:
        step = int(math.ceil(len(sites) / 64))
        sites = sites[::step]
        policy = f"{policy}; simulated on every {step}th site"
    anchor = np.asarray(block.anchor)
    n = len(sites)
    cap = 50 * block.N ** 2 * 4
    rng_keys: dict = {}
    per_env = []
    for i in range(M):
        env_seed = derive_seed(seed, "annealed", i)
        env = model.sample(env_seed)
        right = np.zeros(n)
        ysum = np.zeros((n, d))
        cube_hits: list = []
        for j, z in enumerate(sites):
            for w in range(walks_per_site):
                tr = simulate(env, z + anchor, block, cap, stream_id=j * walks_per_site + w)
                if tr.stop_reason == StopReason.RIGHT:
                    y = tr.end
                    right[j] += 1
                    ysum[j] += y - anchor
                    key = tuple(cube_index(block, y[None, :], side)[0].tolist())
                    rng_keys.setdefault(key, len(rng_keys))
                    cube_hits.append((j, key))
        per_env.append((right / walks_per_site, ysum / walks_per_site, cube_hits))
    keys = sorted(rng_keys)
    col = {k: c for c, k in enumerate(keys)}
    acc = _RatioAccumulator((n, d + len(keys)), n)
    for right, ysum, hits in per_env:
        num = np.zeros((n, d + len(keys)))
        num[:, :d] = ysum
        for j, key in hits:
            num[j, d + col[key]] += 1.0 / walks_per_site
        acc.add(num, right)
    ratio, half = acc.result()
    return AnnealedReference(block.N, theta, block.vhat, model.fingerprint, sites, policy, side,
                             keys, acc.sd / acc.m, ratio[:, :d], half[:, :d], ratio[:, d:],
                             half[:, d:], M, False, True)


# -- classification ----------------------------------------------------------


@dataclass
class BlockReport:
    anchor: tuple
    N: int
    metric_1: float  # max wrong-exit probability over tested sites
    metric_2: float  # max l1 gap of conditioned exit expectations
    metric_3: float  # max gap of conditioned hypercube probabilities
    thresholds: tuple
    good: bool
    site_policy: str
    n_sites: int
    reference_ci: tuple  # (max expectation half width, max cube half width)

    def to_row(self) -> dict:
        row = {"level": self.N}
        for i, c in enumerate(self.anchor):
            row[f"x{i + 1}"] = c
        row.update(metric_1=self.metric_1, metric_2=self.metric_2, metric_3=self.metric_3,
                   threshold_1=self.thresholds[0], threshold_2=self.thresholds[1],
                   threshold_3=self.thresholds[2], good=int(self.good))
        return row

    def to_dict(self):
        return dict(self.__dict__, anchor=list(self.anchor), thresholds=list(self.thresholds),
                    reference_ci=list(self.reference_ci))


def _is_good(metrics, thresholds) -> bool:
    return all(m <= t for m, t in zip(metrics, thresholds))


def classify_block(env: Environment, anchor, N: int, params: LadderParams,
                   reference: AnnealedReference, method: str = "direct") -> BlockReport:
    """Good/bad verdict of the block P(anchor, N) against an annealed reference.

    Metrics are evaluated at the reference's tested sites (all of the
    middle third unless the reference subsampled it).
    """
    if reference.N != N or reference.theta != params.theta:
        raise ReferenceMismatch(
            f"reference built for N={reference.N}, theta={reference.theta}; "
            f"asked N={N}, theta={params.theta}")
    if len(reference.vhat) != env.d:
        raise ReferenceMismatch("reference dimension differs from the environment")
    anchor = tuple(int(a) for a in anchor)
    d = env.d
    block = Block(anchor, N, reference.vhat)
    f, rows = _fields_at_sites(env, block, params.theta, reference.sites, method)
    if f.side != reference.cube_side:
        raise ReferenceMismatch("cube side differs from the reference")
    p = rows[:, 0]
    m1 = float(np.max(1.0 - p))
    with np.errstate(divide="ignore", invalid="ignore"):
        exp = rows[:, 1:1 + d] / p[:, None]
        cubes_q = rows[:, 1 + d:] / p[:, None]
    m2 = float(np.max(np.abs(exp - reference.expectation).sum(axis=1)))
    # align cube columns by key; cubes absent on one side count as probability 0
    keys = sorted(set(f.cube_keys) | set(reference.cube_keys))
    q = np.zeros((len(p), len(keys)))
    a = np.zeros((len(p), len(keys)))
    pos = {k: i for i, k in enumerate(keys)}
    q[:, [pos[k] for k in f.cube_keys]] = cubes_q
    a[:, [pos[k] for k in reference.cube_keys]] = reference.cubes
    m3 = float(np.max(np.abs(q - a))) if keys else 0.0
    th = params.thresholds(N)
    ci = (float(reference.expectation_ci.max(initial=0.0)),
          float(reference.cubes_ci.max(initial=0.0)))
    return BlockReport(anchor, N, m1, m2, m3, th, _is_good((m1, m2, m3), th),
                       reference.site_policy, len(reference.sites), ci)


# -- census ------------------------------------------------------------------


@dataclass
class CensusReport:
    L: int
    levels: tuple
    bad_counts: tuple
    totals: tuple
    threshold: float
    theta_holds: bool
    blocks: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {"L": self.L, "levels": list(self.levels), "J": list(self.bad_counts),
                "totals": list(self.totals), "threshold": self.threshold,
                "theta_holds": self.theta_holds}

    def rows(self) -> list[dict]:
        return [b.to_row() for b in self.blocks]

    def to_csv(self, path):
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            if not rows:
                fh.write("level,metric_1,metric_2,metric_3,threshold_1,threshold_2,threshold_3,good\n")
                return
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def bad_block_census(env: Environment, L: int, ladder: ScaleLadder, params: LadderParams,
                     references: dict, vhat=None, workers: int = 1,
                     axis: int = 0) -> CensusReport:
    """Classify every block of every ladder level that meets the cone C_L.

    Homogeneous environments are translation invariant, so one block per
    level is solved and its metrics are shared by all anchors.
    """
    cone = Cone(L, params.delta, axis=axis, vhat=vhat, d_=env.d)
    threshold = float(L) ** (params.alpha + params.delta)
    counts, totals, blocks = [], [], []
    for N in ladder.levels:
        if N not in references:
            raise ReferenceMismatch(f"no reference for level {N}")
        ref = references[N]
        anchors = enumerate_blocks(N, cone, ref.vhat)
        if env.is_homogeneous and anchors:
            proto = classify_block(env, anchors[0], N, params, ref)
            reps = [BlockReport(a, N, proto.metric_1, proto.metric_2, proto.metric_3,
                                proto.thresholds, proto.good, proto.site_policy,
                                proto.n_sites, proto.reference_ci) for a in anchors]
        else:
            reps = ordered_map(lambda a: classify_block(env, a, N, params, ref), anchors, workers)
        blocks.extend(reps)
        counts.append(sum(not r.good for r in reps))
        totals.append(len(reps))
    holds = all(c <= threshold for c in counts)
    return CensusReport(int(L), tuple(ladder.levels), tuple(counts), tuple(totals), threshold,
                        holds, blocks)
