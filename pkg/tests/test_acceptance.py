"""Acceptance suite: one test per primary criterion, each reporting a pass/fail line."""
import hashlib
import math
import time

import numpy as np
import pytest

from rwre import (DirichletSites, EnvironmentModel, LatticeLaw, Slab, TrapMixture, TrapOverlay,
                  ExitTailQuery, annealed_reference, apply_trap, atypical_exit_tail,
                  bad_block_census, biased, build_environment, build_ladder, classify_block,
                  effective_criterion_evaluate, effective_criterion_search, exit_point_floor,
                  llt_discrepancy_report, rho_band_decomposition, scale_R, solve_exit, srw,
                  t_gamma_estimate)
from rwre import cli
from rwre.criteria import (CONSISTENT, INCONSISTENT, criterion_box, criterion_prefactor,
                           criterion_slab, sample_h_rho)
from rwre.multiscale import LadderParams
from rwre.solver import rho_of_box
from rwre.walk import replica_seeds, run_replicas

from conftest import record_acceptance
from oracles import backward_escape, ruin, scale_R_ref
from test_cli import CONFIGS, digests, run

PARAMS = LadderParams(0.5, 0.9, 0.05, 0.105, 0.025, 0.025, gamma=0.5, L1=16, m=2)
DIRICHLET = EnvironmentModel(2, 0.05, DirichletSites((2, 1, 1, 1)))


class Fixed:
    """Replica sampler that hands every walk the same environment."""
    def __init__(self, env):
        self.env, self.d = env, env.d

    def sample(self, s):
        return self.env


def check(n, ok, detail):
    record_acceptance(n, bool(ok), detail)
    assert ok, detail


def test_01_ruin_oracle():
    solve_exit(build_environment(biased(2), 0), Slab((1, 0), 2, 2, "periodic", 2), (0, 0))  # JIT warmup
    t0 = time.perf_counter()
    sol = solve_exit(build_environment(biased(2), 0), Slab((1, 0), 8, 8, "periodic", 4), (0, 0))
    dt = time.perf_counter() - t0
    err = abs(sol.h_start - (1 - 0.5 ** 8) / (1 - 0.5 ** 16))
    check(1, err <= 1e-10 and dt < 1, f"|h - ruin| = {err:.2e}, {dt:.2f} s")


def test_02_solver_mc_consistency():
    t0 = time.perf_counter()
    region = Slab((1, 0), 9, 9, "absorbing", 8)  # the 17x17 box -8..8
    tvs = []
    for seed in (1, 2, 3):
        env = build_environment(DIRICHLET, seed)
        exact = solve_exit(env, region, (0, 0)).distribution()
        M = 10 ** 5
        res = run_replicas(Fixed(env), replica_seeds(seed, "mc", range(M)), region,
                           np.zeros(2, np.int64), 10 ** 6)
        pts, cnt = np.unique(res.finals, axis=0, return_counts=True)
        emp = {tuple(p): c / M for p, c in zip(pts.tolist(), cnt)}
        tvs.append(0.5 * sum(abs(emp.get(p, 0) - exact.get(p, 0)) for p in set(emp) | set(exact)))
    dt = time.perf_counter() - t0
    check(2, max(tvs) <= 0.02 and dt < 60,
          f"TV = {', '.join(f'{v:.4f}' for v in tvs)}, {dt:.1f} s")


def test_03_rho_decay():
    t0 = time.perf_counter()
    Ls = [8, 16, 24, 32]
    env = build_environment(biased(2), 0)
    logs = [math.log(rho_of_box(env, criterion_slab(L, 16))) for L in Ls]
    slope = np.polyfit(Ls, logs, 1)[0]
    dt = time.perf_counter() - t0
    rel = abs(slope / math.log(0.5) - 1)
    check(3, rel <= 0.05 and dt < 30, f"slope {slope:.5f} vs log 0.5 (rel {rel:.2e}), {dt:.1f} s")


def test_04_t_gamma_discrimination():
    t0 = time.perf_counter()
    rb = t_gamma_estimate(biased(2), (1, 0), 1.0, 0.5, [8, 16, 24], 10 ** 4, seed=0)
    rs = t_gamma_estimate(srw(2), (1, 0), 1.0, 0.5, [8, 16, 24], 10 ** 4, seed=0)
    in_ci = all(c.ci_low <= backward_escape(0.4, 0.2, 1, int(c.L)) <= c.ci_high for c in rb.cells)
    dt = time.perf_counter() - t0
    check(4, rb.verdict == CONSISTENT and rs.verdict == INCONSISTENT and in_ci and dt < 120,
          f"biased {rb.verdict}, srw {rs.verdict}, ruin inside CI: {in_ci}, {dt:.1f} s")


FIRST_PASS_L = 40  # regression value from exact solves of the reference search


def test_05_effective_criterion():
    L, Lt = 8, 64
    rep = effective_criterion_evaluate(biased(2), criterion_box(L, Lt), 0.0, 1)
    expect = 1.0 * math.log(1 / 0.2) ** 3 * Lt * L ** 4
    a0 = rep.value == criterion_prefactor(1.0, 0.2, 2, L, Lt) and math.isclose(rep.value, expect,
                                                                               rel_tol=1e-14)
    s_srw = effective_criterion_search(srw(2), [8, 16, 24, 32], a_grid=(0, 0.5, 1.0))
    s_b = effective_criterion_search(biased(2), [8, 16, 24, 32, 40, 48], a_grid=(0, 0.5, 1.0))
    check(5, a0 and s_srw.first_pass_L is None and s_b.first_pass_L == FIRST_PASS_L,
          f"a=0 prefactor exact: {a0}; srw first pass {s_srw.first_pass_L}; "
          f"biased first pass {s_b.first_pass_L}")


def test_06_band_partition_identity():
    fixtures = []
    tm = TrapMixture(biased(2), TrapOverlay((-14, 0), 14, 0.99, 1e-3), 0.01)
    fixtures.append((sample_h_rho(tm, criterion_slab(16, 256), 2000, seed=0), 16))
    fixtures.append((sample_h_rho(DIRICHLET, criterion_slab(8, 16), 50, seed=1), 8))
    fixtures.append((sample_h_rho(biased(2), criterion_slab(12, 16), 5, seed=2), 12))
    ok = True
    for samples, L in fixtures:
        for betas, ks in [((0.5, 1.0), (0.5, 0.25)), ((0.5, 0.75, 1.0), (0.5, 0.5, 0.5))]:
            b = rho_band_decomposition(samples, 0.5, betas, ks, 0.5, L)
            acc = 0.0
            for m in b.masses:
                acc += m
            ok &= b.total == acc and sum(b.counts) == len(samples)
            ok &= math.isclose(b.total, b.mean_rho_a, rel_tol=1e-12)
    check(6, ok, f"{len(fixtures)} fixture sets x 2 band layouts, bitwise sums equal: {ok}")


def test_07_scale_golden():
    vals = (scale_R(1, 16), scale_R(1, 100), scale_R(2, 100))
    lad = build_ladder(10 ** 4, LadderParams(0.5, 0.9, 0.05, 0.105, 0.025, 0.025, L1=4, m=3))
    ok = vals == (3, 11, 36) == tuple(scale_R_ref(k, N) for k, N in ((1, 16), (1, 100), (2, 100)))
    ok &= lad.levels == (4, 12, 36, 108, 324) and lad.iota == 5
    check(7, ok, f"scale_R = {vals}, ladder {lad.levels}, iota {lad.iota}")


def test_08_good_bad_classification():
    t0 = time.perf_counter()
    ref = annealed_reference(biased(2), 16, PARAMS.theta, M=1)
    env = build_environment(biased(2), 0)
    lad = build_ladder(100, PARAMS)
    census = bad_block_census(env, 100, lad, PARAMS, {N: ref for N in lad.levels})
    good = classify_block(env, (0, 0), 16, PARAMS, ref)
    R = scale_R(6, 16) * 16
    trapped = apply_trap(env, TrapOverlay((0, 0), R, 0.5, 0.01))
    bad = classify_block(trapped, (0, 0), 16, PARAMS, ref)
    dt = time.perf_counter() - t0
    ok = (census.bad_counts == (0,) * len(lad.levels) and good.good
          and good.metric_2 == 0 and good.metric_3 == 0 and R >= scale_R(1, 16)
          and bad.metric_1 > bad.thresholds[0] and not bad.good and dt < 120)
    check(8, ok, f"bad counts {census.bad_counts} of {census.totals}; trap radius {R}: "
          f"metric_1 {bad.metric_1:.3g} > {bad.thresholds[0]:.3g}; {dt:.1f} s")


def test_09_naive_trap_tail():
    L, beta, M = 16, 0.5, 10 ** 4
    r = math.ceil(L ** beta)
    tm = TrapMixture(biased(2), TrapOverlay((-r, 0), r, 0.99, 1e-3), 0.01)
    q = ExitTailQuery("slab", 1.0, beta, L, M)
    rep = atypical_exit_tail(tm, q)
    sigma = math.sqrt(0.01 * 0.99 / M)
    trapped = [s for s in rep.seeds if tm.is_trapped(s)]
    hs = [solve_exit(tm.sample(s), q.region(2), (0, 0), field=False).right_mass for s in trapped]
    thr = math.exp(-L ** beta)
    ok = abs(rep.fraction - 0.01) <= 3 * sigma and all(h <= thr for h in hs)
    ok &= np.array_equal(rep.below, np.array([tm.is_trapped(s) for s in rep.seeds]))
    check(9, ok, f"fraction {rep.fraction:.4f} (|z| = {abs(rep.fraction - 0.01) / sigma:.2f}); "
          f"{len(hs)} trapped, max h {max(hs):.3g} <= {thr:.3g}")


def test_10_llt_numerics():
    t0 = time.perf_counter()
    ns = [64, 100, 144, 196, 256]
    rep = llt_discrepancy_report(LatticeLaw.srw(1), ns)
    scaled = [p * math.sqrt(n) for p, n in zip(rep.sup_p, ns)]
    ea, eb = rep.exponents["sup_p"], rep.exponents["sup_first"]
    dt = time.perf_counter() - t0
    ok = all(0.75 <= s <= 0.85 for s in scaled) and abs(ea - 0.5) <= 0.05 and abs(eb - 1) <= 0.15
    check(10, ok and dt < 30, f"sqrt(n) sup in [{min(scaled):.4f}, {max(scaled):.4f}]; "
          f"exponents {ea:.4f}, {eb:.4f}; {dt:.1f} s")


def test_11_floor_and_variance():
    t0 = time.perf_counter()
    model = EnvironmentModel(2, 0.05, DirichletSites((6, 2, 3, 3)))
    reps = [exit_point_floor(model, L, 4, seed=1) for L in (8, 16, 32)]
    floors = [r.floor for r in reps]
    var = [r.scaled_variance for r in reps]
    dt = time.perf_counter() - t0
    ok = (min(floors) > 0 and max(floors) / min(floors) <= 4 and max(var) / min(var) <= 4
          and dt < 300)
    check(11, ok, f"floors {', '.join(f'{v:.4f}' for v in floors)}; "
          f"var/L^2 {', '.join(f'{v:.3f}' for v in var)}; {dt:.1f} s")


def test_12_determinism(tmp_path):
    bad = []
    for kind, cfg in sorted(CONFIGS.items()):
        outs = []
        for tag, w in (("a", 1), ("b", 1), ("c", 8)):
            d = tmp_path / kind / tag
            assert run(tmp_path, kind, cfg, "--workers", str(w), "--out", str(d)) == 0
            outs.append(digests(d))
        if not outs[0] == outs[1] == outs[2]:
            bad.append(kind)
    check(12, not bad, f"{len(CONFIGS)} kinds, rerun and workers 1 vs 8 bitwise equal"
          + (f"; differing: {bad}" if bad else ""))
