import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rwre import (Deterministic, DirichletSites, EnvironmentModel, PerturbedSRW,
                  Slab, TrapMixture, TrapOverlay, TwoPointMixture, apply_trap, biased,
                  build_environment, model_from_json, model_to_json, solve_exit, srw)
from rwre.errors import ModelInvalid, OverlayInvalid

MODELS = [
    biased(2),
    srw(3),
    EnvironmentModel(2, 0.05, DirichletSites((1.0, 1.0, 1.0, 1.0))),
    EnvironmentModel(3, 0.02, DirichletSites((0.5, 2.0, 1.0, 1.0, 3.5, 1.5))),
    EnvironmentModel(2, 0.1, PerturbedSRW(0.1, 0)),
    EnvironmentModel(3, 0.05, PerturbedSRW(0.1, 2)),
    EnvironmentModel(2, 0.1, TwoPointMixture((0.4, 0.2, 0.2, 0.2), (0.1, 0.3, 0.3, 0.3), 0.3)),
]

points = st.lists(st.integers(-10 ** 6, 10 ** 6), min_size=3, max_size=3)


def test_deterministic_kernel_everywhere():
    env = build_environment(biased(2), 5)
    pts = np.array([[0, 0], [3, -7], [10 ** 9, 5], [-123456, 999]])
    assert np.array_equal(env.kernels(pts), np.tile([0.4, 0.2, 0.2, 0.2], (4, 1)))


def test_perturbed_zero_is_srw():
    env = build_environment(EnvironmentModel(3, 1 / 6, PerturbedSRW(0.0)), 11)
    k = env.kernels(np.array([[0, 0, 0], [4, -2, 9], [-1, 1, 3]]))
    assert np.array_equal(k, np.full((3, 6), 1 / 6))


def test_dirichlet_sites_differ_and_normalize():
    env = build_environment(EnvironmentModel(2, 0.0, DirichletSites((1, 1, 1, 1)),
                                             test_mode=True), 7)
    a, b = env.site_kernel((0, 0)), env.site_kernel((1, 0))
    assert not np.array_equal(a, b)
    for k in (a, b):
        assert abs(k.sum() - 1) <= 1e-12 and np.all(k >= 0)


def test_seeds_give_different_kernels():
    m = EnvironmentModel(2, 0.05, DirichletSites((1, 1, 1, 1)))
    k1 = build_environment(m, 1).site_kernel((3, 4))
    k2 = build_environment(m, 2).site_kernel((3, 4))
    assert not np.array_equal(k1, k2)


def test_purity_repeat_calls():
    env = build_environment(MODELS[3], 99)
    assert np.array_equal(env.site_kernel((1, 2, 3)), env.site_kernel((1, 2, 3)))


@pytest.mark.parametrize("model", MODELS, ids=lambda m: type(m.variant).__name__)
@given(seed=st.integers(0, 2 ** 64 - 1), pts=st.lists(points, min_size=1, max_size=20))
def test_kernel_invariants(model, seed, pts):
    env = build_environment(model, seed)
    x = np.array(pts, dtype=np.int64)[:, :model.d]
    k = env.kernels(x)
    assert np.all(k >= 0)
    assert np.all(np.abs(k.sum(axis=1) - 1) <= 1e-12)
    assert np.all(k >= model.kappa - 1e-15)
    # batch lookup equals pointwise lookup bit for bit
    assert np.array_equal(k[0], env.site_kernel(x[0]))


@given(eps=st.floats(0, 0.2), seed=st.integers(0, 2 ** 32), pts=st.lists(points, min_size=1, max_size=10))
def test_perturbed_deviation_bounded(eps, seed, pts):
    model = EnvironmentModel(2, 0.0, PerturbedSRW(eps), test_mode=True) if eps > 0.24 else \
        EnvironmentModel(2, 0.25 - eps, PerturbedSRW(eps))
    k = build_environment(model, seed).kernels(np.array(pts)[:, :2])
    assert np.all(np.abs(k - 0.25) <= eps + 1e-15)


def test_field_identical_across_threads():
    from concurrent.futures import ThreadPoolExecutor

    env = build_environment(MODELS[2], 1234)
    g = np.stack(np.meshgrid(np.arange(-20, 21), np.arange(-20, 21), indexing="ij"), -1).reshape(-1, 2)
    ref = env.kernels(g)
    with ThreadPoolExecutor(8) as ex:
        parts = list(ex.map(lambda c: env.kernels(c), np.array_split(g, 8)))
    assert np.array_equal(np.concatenate(parts), ref)


def test_pinned_dirichlet_kernel():
    # regression: seed-stable sampler (value recorded once)
    k = build_environment(MODELS[2], 7).site_kernel((0, 0))
    assert np.allclose(k, PINNED_DIRICHLET, atol=1e-15, rtol=0)


@pytest.mark.parametrize("kappa,variant,d", [
    (0.3, Deterministic((0.25,) * 4), 2),
    (0.1, Deterministic((0.5, 0.5, 0.0, 0.0)), 2),
    (0.1, Deterministic((0.4, 0.2, 0.2, 0.1)), 2),
    (0.1, Deterministic((0.25,) * 4), 1),
    (0.0, Deterministic((1.0, 0, 0, 0)), 2),
    (0.2, PerturbedSRW(0.1), 2),
    (0.05, DirichletSites((1, 1, 1)), 2),
    (0.05, DirichletSites((1, 1, 0, 1)), 2),
    (0.1, TwoPointMixture((0.25,) * 4, (0.25,) * 4, 1.5), 2),
])
def test_invalid_models(kappa, variant, d):
    with pytest.raises(ModelInvalid):
        EnvironmentModel(d, kappa, variant)


def test_json_roundtrip():
    for m in MODELS:
        back, seed = model_from_json(model_to_json(m, seed=17))
        assert back == m and seed == 17
        assert set(json.loads(model_to_json(m, seed=17))) >= {"d", "kappa", "variant", "seed"}


# -- traps -------------------------------------------------------------------


def test_radius_zero_overlay_is_identity():
    env = build_environment(MODELS[2], 3)
    t = apply_trap(env, TrapOverlay((0, 0), 0, 0.5, 0.05))
    g = np.stack(np.meshgrid(np.arange(-5, 6), np.arange(-5, 6), indexing="ij"), -1).reshape(-1, 2)
    assert np.array_equal(t.kernels(g), env.kernels(g))


@given(cx=st.integers(-5, 5), cy=st.integers(-5, 5), r=st.integers(0, 4),
       bias=st.floats(0.2, 0.85), seed=st.integers(0, 1000))
def test_trap_locality_and_floor(cx, cy, r, bias, seed):
    env = build_environment(MODELS[2], seed)
    ov = TrapOverlay((cx, cy), r, bias, 0.05)
    t = apply_trap(env, ov)
    g = np.stack(np.meshgrid(np.arange(-12, 13), np.arange(-12, 13), indexing="ij"), -1).reshape(-1, 2)
    a, b = env.kernels(g), t.kernels(g)
    dist = np.abs(g - [cx, cy]).sum(axis=1)
    outside = (dist > r) | (dist == 0)
    assert np.array_equal(a[outside], b[outside])
    inside = ~outside
    assert np.all(np.abs(b.sum(axis=1) - 1) <= 1e-12)
    assert np.all(b[inside] >= 0.05 - 1e-15)
    # inward mass: toward the centre along each axis where the offset is nonzero
    for x, k in zip(g[inside], b[inside]):
        off = np.array([cx, cy]) - x
        inward = sum(k[2 * i + (0 if off[i] > 0 else 1)] for i in range(2) if off[i] != 0)
        assert inward >= bias - 1e-12


@pytest.mark.parametrize("bias,floor", [(0.95, 0.05), (0.05, 0.05), (0.5, 0.3), (0.5, 0.0)])
def test_overlay_invalid(bias, floor):
    with pytest.raises(OverlayInvalid):
        TrapOverlay((0, 0), 3, bias, floor)


def test_trap_lowers_exit_probability():
    # SRW base, radius-4 trap with floor 0.05 centred at (-2, 0) inside [-4, 4]^2
    env = build_environment(srw(2), 0)
    box = Slab((1, 0), 5, 5, "absorbing", 4)
    base = solve_exit(env, box, (0, 0)).right_mass
    t = apply_trap(env, TrapOverlay((-2, 0), 4, 1 - 3 * 0.05, 0.05))
    trapped = solve_exit(t, box, (0, 0)).right_mass
    assert trapped < base
    # symmetric trap at the centre keeps the four faces symmetric: right mass 1/4
    c = apply_trap(env, TrapOverlay((0, 0), 4, 1 - 3 * 0.05, 0.05))
    assert solve_exit(c, box, (0, 0)).right_mass == pytest.approx(0.25, abs=1e-9)


def test_trap_mixture_fraction():
    tm = TrapMixture(biased(2), TrapOverlay((0, 0), 2, 0.6, 0.05), 0.1)
    n = sum(tm.is_trapped(s) for s in range(20000))
    assert abs(n / 20000 - 0.1) < 3 * np.sqrt(0.09 / 20000)
    s = next(s for s in range(100) if tm.is_trapped(s))
    assert tm.sample(s).traps and not tm.sample(next(s for s in range(100) if not tm.is_trapped(s))).traps


PINNED_DIRICHLET = [0.07637911552137305, 0.3061040393225049, 0.4623362355094029, 0.1551806096467192]
