import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rwre import (TrapMixture, TrapOverlay, biased, effective_criterion_evaluate,
                  effective_criterion_search, regeneration_tail, rho_band_decomposition, srw,
                  t_gamma_estimate)
from rwre.criteria import (CONSISTENT, INCONCLUSIVE, INCONSISTENT, TGammaCell, band_index,
                           criterion_box, criterion_from_rho, criterion_prefactor,
                           criterion_slab, sample_h_rho, tgamma_verdict)
from rwre.errors import BadParameter, InsufficientData, SpecInvalid

from conftest import always, right_only
from oracles import backward_escape, ruin


# -- (T)_gamma -------------------------------------------------------------------


@pytest.fixture(scope="module")
def biased_tgamma():
    return t_gamma_estimate(biased(2), (1, 0), 1.0, 0.5, [4, 8, 12], 40000, seed=3)


def test_tgamma_biased_matches_ruin(biased_tgamma):
    rep = biased_tgamma
    assert rep.verdict == CONSISTENT
    for c in rep.cells:
        exact = backward_escape(0.4, 0.2, 1, c.L)
        assert c.ci_low <= exact <= c.ci_high
        lo = -math.inf if c.norm_low is None else c.norm_low
        assert lo <= c.L ** -0.5 * math.log(exact) <= c.norm_high
    norms = [c.normalized for c in rep.cells]
    assert all(b < a for a, b in zip(norms, norms[1:]))
    exact_norms = [L ** -0.5 * math.log(backward_escape(0.4, 0.2, 1, L)) for L in (4, 8, 12)]
    assert all(b < a for a, b in zip(exact_norms, exact_norms[1:]))


def test_tgamma_srw_inconsistent():
    rep = t_gamma_estimate(srw(2), (1, 0), 1.0, 0.5, [4, 8, 12], 10000, seed=1)
    for c in rep.cells:
        assert abs(c.p_hat - 0.5) <= 3 * math.sqrt(0.25 / c.M)
    assert rep.verdict == INCONSISTENT


def test_tgamma_rescaling_M(biased_tgamma):
    # halving M keeps every upper bound below 0, so the verdict is unchanged
    small = t_gamma_estimate(biased(2), (1, 0), 1.0, 0.5, [4, 8, 12], 20000, seed=3)
    assert all(c.norm_high < 0 for c in small.cells + biased_tgamma.cells)
    assert small.verdict == biased_tgamma.verdict


@pytest.mark.parametrize("gamma", [0.0, 1.0, -0.5, 1.5])
def test_tgamma_gamma_open_interval(gamma):
    with pytest.raises(BadParameter):
        t_gamma_estimate(srw(2), (1, 0), 1.0, gamma, [4], 10)


def _cell(L, M, lo, hi):
    return TGammaCell(L, M, 1, 0, 0.1, 0.0, 0.2, (lo + hi) / 2 if lo is not None else None, lo, hi)


def test_verdict_rules():
    assert tgamma_verdict([_cell(4, 0, -1, -0.5)]) == INCONCLUSIVE
    assert tgamma_verdict([_cell(4, 10, -1, 0.0)]) == INCONSISTENT
    assert tgamma_verdict([_cell(4, 10, -1, -0.8), _cell(8, 10, -0.7, -0.6)]) == INCONSISTENT
    assert tgamma_verdict([_cell(4, 10, -1, -0.8), _cell(8, 10, None, -0.9)]) == CONSISTENT


def test_tgamma_csv_rows(biased_tgamma):
    text = biased_tgamma.to_csv()
    assert text.count("\n") == 1 + len(biased_tgamma.cells)
    assert '"verdict"' in biased_tgamma.to_json()


# -- regeneration tail -------------------------------------------------------------


def test_regeneration_tail_straight_right():
    rep = regeneration_tail(right_only(), 0.5, 0.3, 50, 20)
    assert rep.statistic == math.exp(0.3) and rep.censored == 0
    assert rep.histogram == {1: 50}


def test_regeneration_tail_stable_under_doubling():
    a = regeneration_tail(biased(2), 0.5, 0.1, 10000, 400, seed=1)
    b = regeneration_tail(biased(2), 0.5, 0.1, 20000, 400, seed=2)
    assert abs(a.statistic / b.statistic - 1) <= 0.05
    assert a.censored < a.M // 100


def test_regeneration_tail_all_censored():
    # a walk that only steps -e_1 never reaches a new e_1 maximum
    with pytest.raises(InsufficientData):
        regeneration_tail(always(2, 1), 0.5, 0.1, 100, 50)


@pytest.mark.parametrize("kw", [dict(c=0.0), dict(M=0), dict(gamma=1.0)])
def test_regeneration_tail_bad(kw):
    args = dict(gamma=0.5, c=0.1, M=10, horizon=10)
    args.update(kw)
    with pytest.raises(BadParameter):
        regeneration_tail(biased(2), **args)


# -- effective criterion ---------------------------------------------------------------


@pytest.mark.parametrize("L,Lt", [(8, 64), (12, 20), (16, 256)])
def test_a_zero_is_prefactor(L, Lt):
    rep = effective_criterion_evaluate(biased(2), criterion_box(L, Lt), 0.0, 1)
    expect = 1.0 * math.log(1 / 0.2) ** 3 * Lt * L ** 4
    assert rep.mean_rho_a == 1.0
    assert rep.value == rep.prefactor == criterion_prefactor(1.0, 0.2, 2, L, Lt)
    assert rep.value == pytest.approx(expect, rel=1e-14)


def test_deterministic_slab_oracle():
    L, Lt, a = 12, 16, 0.7
    h = ruin(0.4, 0.2, L - 2, L + 2)
    rep = effective_criterion_evaluate(biased(2), criterion_slab(L, Lt), a, 3)
    assert rep.mean_rho_a == pytest.approx(((1 - h) / h) ** a, rel=1e-9)
    assert rep.ci_half_width == 0.0 and rep.M == 3


def test_srw_never_passes():
    # the specification is -(L-2) < x.e1 < L+2, so h = (L-2)/(2L) and rho = (L+2)/(L-2)
    rep = effective_criterion_evaluate(srw(2), criterion_slab(8, 64), 1.0, 1)
    assert rep.mean_rho_a == pytest.approx(10 / 6, rel=1e-9) and not rep.passed
    sym = criterion_from_rho([1.0], criterion_slab(8, 64), 1.0, 0.25, 2)
    assert sym.value == sym.prefactor >= 1 and not sym.passed
    s = effective_criterion_search(srw(2), [8, 12], a_grid=(0, 0.5, 1.0), slab=True,
                                   Lt_rule=lambda L: 16)
    assert s.first_pass_L is None and not any(r.passed for r in s.reports)


def test_search_best_is_minimum():
    s = effective_criterion_search(biased(2), [8, 16], a_grid=(0, 1.0), Lt_rule=lambda L: 16)
    assert s.best.value == min(r.value for r in s.reports)
    assert len(s.reports) == 2 * 3  # a in {0, 1, L^-0.5}


@given(c1=st.floats(1e-3, 1e3), rho=st.lists(st.floats(0, 10), min_size=1, max_size=30),
       a=st.floats(0, 1))
def test_linear_in_c1(c1, rho, a):
    spec = criterion_slab(8, 16)
    r1 = criterion_from_rho(rho, spec, a, 0.2, 2, c1=c1)
    r2 = criterion_from_rho(rho, spec, a, 0.2, 2, c1=2 * c1)
    assert r2.value == 2 * r1.value


@given(rho=st.lists(st.floats(0, 1), min_size=1, max_size=30),
       a=st.lists(st.floats(0, 1), min_size=2, max_size=5, unique=True))
def test_mean_rho_a_monotone(rho, a):
    spec = criterion_slab(8, 16)
    vals = [criterion_from_rho(rho, spec, x, 0.2, 2).mean_rho_a for x in sorted(a)]
    assert all(y <= x * (1 + 1e-12) for x, y in zip(vals, vals[1:]))
    assert criterion_from_rho(rho, spec, 0.0, 0.2, 2).mean_rho_a == 1.0


def test_heavy_tail_reporting():
    rho = [1e-6] * 499 + [1.0]
    spec = criterion_slab(8, 16)
    r = criterion_from_rho(rho, spec, 1.0, 0.2, 2, seed=4)
    assert r.heavy_tailed and r.median_rho_a == pytest.approx(1e-6)
    assert r.bootstrap_ci[0] <= r.mean_rho_a <= r.bootstrap_ci[1]
    assert criterion_from_rho(rho, spec, 1.0, 0.2, 2, seed=4).bootstrap_ci == r.bootstrap_ci


@pytest.mark.parametrize("L,Lt,a", [(8, 64, 1.5), (3, 64, 0.5), (8, 4, 0.5), (8, 512, 0.5)])
def test_spec_invalid(L, Lt, a):
    with pytest.raises(SpecInvalid):
        effective_criterion_evaluate(biased(2), criterion_box(L, Lt), a, 1)


# -- band decomposition -------------------------------------------------------------------


def test_bands_deterministic_all_in_zero():
    s = sample_h_rho(biased(2), criterion_slab(16, 64), 5)
    b = rho_band_decomposition(s, 0.5, (0.5, 1.0), (0.5, 0.25), 0.5, 16)
    assert b.counts == (5, 0, 0) and b.masses[1:] == (0.0, 0.0)


@given(samples=st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1e3)), min_size=1, max_size=60),
       L=st.integers(4, 40))
def test_band_partition_identity(samples, L):
    b = rho_band_decomposition(samples, 0.5, (0.5, 0.75, 1.0), (0.5, 0.5, 0.5), 0.5, L)
    ref = 0.0
    for m in b.masses:
        ref += m
    assert b.total == ref
    assert b.total == pytest.approx(b.mean_rho_a, rel=1e-12, abs=1e-300)
    assert sum(b.counts) == len(samples)
    for h, _ in samples[:5]:
        j = band_index(h, b.thresholds)
        assert (j == 0 and h > b.thresholds[0]) or h <= b.thresholds[j - 1]


@pytest.mark.parametrize("betas,ks,eps", [((0.5, 0.4, 1.0), (1, 1, 1), 0.5),
                                          ((0.6, 1.0), (1, 1), 0.5),
                                          ((0.5, 0.9), (1, 1), 0.5),
                                          ((0.5, 1.0), (1, -1), 0.5),
                                          ((0.5, 1.0), (1, 1), 1.0),
                                          ((0.5, 1.0), (10, 0.01), 0.5)])
def test_bands_bad_parameters(betas, ks, eps):
    with pytest.raises(BadParameter):
        rho_band_decomposition([(0.5, 1.0)], 0.5, betas, ks, eps, 16)


def test_bands_trap_mixture():
    tm = TrapMixture(biased(2), TrapOverlay((-14, 0), 14, 0.99, 1e-3), 0.01)
    M = 10000
    s = sample_h_rho(tm, criterion_slab(16, 256), M, seed=0)
    b = rho_band_decomposition(s, 0.5, (0.5, 1.0), (0.5, 0.25), 0.5, 16)
    trapped = sum(tm.is_trapped(x) for x in __import__("rwre").walk.replica_seeds(0, "bands", range(M)))
    assert b.counts[-1] == trapped and b.masses[-1] > 0
    assert abs(b.counts[-1] / M - 0.01) <= 3 * math.sqrt(0.01 * 0.99 / M)
    assert max(h for h, _ in s) > b.thresholds[0] and min(h for h, _ in s) <= b.thresholds[-1]
