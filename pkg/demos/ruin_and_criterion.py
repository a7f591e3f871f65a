"""Exact exit probabilities on a biased slab versus the gambler's-ruin formula,
and the effective-criterion scan over L."""
import math

from rwre import Slab, biased, build_environment, effective_criterion_search, solve_exit

env = build_environment(biased(2), 0)
r = 0.2 / 0.4
for L in (4, 8, 16):
    h = solve_exit(env, Slab((1, 0), L, L, "periodic", 4), (0, 0)).h_start
    exact = (1 - r ** L) / (1 - r ** (2 * L))
    print(f"L={L:3d}  solver {h:.15f}  ruin {exact:.15f}  diff {abs(h - exact):.1e}")

s = effective_criterion_search(biased(2), [8, 16, 24, 32, 40, 48], a_grid=(0, 0.5, 1.0))
for rep in s.reports:
    print(f"L={rep.L:3.0f} a={rep.a:.3f}  value {rep.value:.3e}  passed {rep.passed}")
print("first passing L:", s.first_pass_L)
