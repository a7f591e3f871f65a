import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rwre import (Block, Deterministic, DirichletSites, EnvironmentModel, ExitTailQuery,
                  TrapMixture, TrapOverlay, atypical_exit_tail, biased, build_environment,
                  direction_gap, exit_point_floor, intersection_census, solve_exit, srw,
                  transversal_fluctuation_tail)
from rwre.errors import BadParameter, NoDrift
from rwre.exit_stats import admissible, annealed_exit_law

from oracles import ruin

STRONG = EnvironmentModel(2, 0.01, Deterministic((0.97, 0.01, 0.01, 0.01)))


# -- atypical tails ----------------------------------------------------------------


@pytest.mark.parametrize("geometry", ["slab", "box", "cone"])
def test_deterministic_tail_is_exact(geometry):
    q = ExitTailQuery(geometry, 1.0, 0.5, 16, 50)
    rep = atypical_exit_tail(biased(2), q)
    assert rep.exact and np.all(rep.ci_half_width == 0)
    assert rep.fraction in (0.0, 1.0)
    assert len(set(rep.probabilities.tolist())) == 1


def test_deterministic_slab_tail_zero():
    rep = atypical_exit_tail(biased(2), ExitTailQuery("slab", 1.0, 0.5, 16, 100))
    # depth L^beta = 4: ruin oracle h = (1 - 0.5^4) / (1 - 0.5^20), far above e^{-4}
    assert rep.probabilities[0] == pytest.approx(ruin(0.4, 0.2, 4, 16), abs=1e-9)
    assert rep.fraction == 0.0 and rep.probabilities[0] > rep.threshold


def test_trap_mixture_tail():
    L, beta = 16, 0.5
    r = math.ceil(L ** beta)
    tm = TrapMixture(biased(2), TrapOverlay((-r, 0), r, 0.99, 1e-3), 0.01)
    rep = atypical_exit_tail(tm, ExitTailQuery("slab", 1.0, beta, L, 10000))
    trapped = np.array([tm.is_trapped(s) for s in rep.seeds])
    assert np.array_equal(rep.below, trapped)
    assert abs(rep.fraction - 0.01) <= 3 * math.sqrt(0.01 * 0.99 / 10000)
    for s in [s for s, t in zip(rep.seeds, trapped) if t][:3]:
        h = solve_exit(tm.sample(s), ExitTailQuery("slab", 1.0, beta, L, 1).region(2), (0, 0),
                       field=False).right_mass
        assert h <= math.exp(-L ** beta)


def test_underflow_warning():
    with pytest.warns(RuntimeWarning):
        rep = atypical_exit_tail(biased(2), ExitTailQuery("slab", 1e6, 0.5, 16, 10))
    assert rep.fraction == 0.0 and rep.underflow


def test_tail_query_errors():
    with pytest.raises(BadParameter):
        ExitTailQuery("slab", 1.0, 0.5, 16, 0)
    with pytest.raises(BadParameter):
        ExitTailQuery("sphere", 1.0, 0.5, 16, 10)
    with pytest.raises(BadParameter):
        ExitTailQuery("slab", 1.0, 1.0, 16, 10)


def test_tail_probabilities_in_unit_interval():
    m = EnvironmentModel(2, 0.05, DirichletSites((2, 1, 1, 1)))
    rep = atypical_exit_tail(m, ExitTailQuery("box", 0.5, 0.5, 6, 30, L_grid=(4, 6)))
    assert np.all((rep.probabilities >= 0) & (rep.probabilities <= 1))
    lo, hi = rep.fraction_ci
    assert 0 <= lo <= rep.fraction <= hi <= 1
    assert [L for L, _ in rep.per_L] == [4.0, 6.0]
    assert rep.to_csv().count("\n") == 31


# -- exit-point floor ----------------------------------------------------------------


@given(y=st.lists(st.integers(-50, 50), min_size=1, max_size=30), L=st.integers(4, 20),
       C=st.floats(0.1, 2))
def test_admissibility(y, L, C):
    pts = np.column_stack([np.full(len(y), L * L), y])
    ok = admissible(pts, (0, 0), L, C)
    assert np.array_equal(ok, np.abs(np.array(y)) < C * L)


def test_floor_deterministic_symmetric():
    rep = exit_point_floor(biased(2), 8, 1)
    t = rep.law.table()
    for (y1, y2), p in t.items():
        assert t[(y1, -y2)] == pytest.approx(p, rel=1e-9, abs=1e-15)
    assert all(abs(y[1]) < 8 for y in [rep.argmin])
    sol = solve_exit(build_environment(biased(2), 0), Block((0, 0), 8), (0, 0), field=False)
    assert sum(t.values()) == pytest.approx(sol.right_mass, abs=1e-10)
    assert rep.right_mass == pytest.approx(sol.right_mass, abs=1e-10)


def test_floor_random_model_table_sum():
    m = EnvironmentModel(2, 0.05, DirichletSites((6, 2, 3, 3)))
    law = annealed_exit_law(m, 8, 3, seed=2)
    per = [solve_exit(m.sample(s), Block((0, 0), 8), (0, 0), field=False).right_mass
           for s in __import__("rwre").walk.replica_seeds(2, "exit-law", range(3))]
    assert law.right_mass == pytest.approx(np.mean(per), abs=1e-10)


def test_start_outside_middle_third():
    with pytest.raises(BadParameter):
        annealed_exit_law(biased(2), 8, 1, start=(40, 0))


# -- direction gap -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def gaps():
    return [direction_gap(STRONG, L, 400, seed=1) for L in (8, 16, 32)]


def test_direction_gap_deterministic(gaps):
    for g in gaps:
        assert g.gap <= 2 * g.se or g.gap == 0.0
        assert g.v_emp[0] > 0.99


def test_direction_gap_non_increasing(gaps):
    for a, b in zip(gaps, gaps[1:]):
        assert b.gap <= a.gap + a.se


def test_direction_gap_srw():
    with pytest.raises(NoDrift):
        direction_gap(srw(2), 16, 200, horizon=1000)


# -- fluctuations -------------------------------------------------------------------------


def test_fluctuation_strong_bias():
    rep = transversal_fluctuation_tail(STRONG, 16, 10000, seed=1)
    assert rep.union <= 0.01 and rep.censored == 0


def test_fluctuation_structure_and_monotonicity():
    a = transversal_fluctuation_tail(biased(2), 16, 2000, seed=1)
    b = transversal_fluctuation_tail(biased(2), 16, 2000, seed=1, k=4)
    for r in (a, b):
        assert max(r.transversal, r.backtrack) <= r.union <= r.transversal + r.backtrack
        assert 0 <= r.union <= 1
    assert b.transversal <= a.transversal and b.backtrack == a.backtrack
    assert b.R_transversal > a.R_transversal


# -- intersections ---------------------------------------------------------------------------


def test_shared_start_counts_at_least_one():
    rep = intersection_census(biased(2), 8, 300, ((0, 0), (0, 0)), seed=2)
    assert rep.counts.min() >= 1 and rep.dimension_warning


def test_swap_invariance():
    a = intersection_census(biased(2), 8, 300, ((0, 0), (0, 3)), seed=5, stream_ids=(0, 1))
    b = intersection_census(biased(2), 8, 300, ((0, 3), (0, 0)), seed=5, stream_ids=(1, 0))
    assert np.array_equal(a.counts, b.counts)


def test_d4_tail_decreasing():
    rep = intersection_census(biased(4), 8, 10000, ((0, 0, 0, 0), (0, 8, 0, 0)), seed=1)
    assert not rep.dimension_warning
    t = [rep.tail[m] for m in (1, 2, 3)]
    assert t[0] >= t[1] >= t[2]
    if t[0] > 0:
        assert t[1] / t[0] < 1
    # counts beyond zero decay roughly geometrically
    dist = rep.distribution()
    assert dist.get(2, 0) < dist.get(1, 0) and dist.get(3, 0) < dist.get(2, 0)


def test_starts_must_be_on_H0():
    with pytest.raises(BadParameter):
        intersection_census(biased(2), 8, 10, ((1, 0), (0, 0)))
