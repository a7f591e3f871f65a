"""Environments with a rare trap: fraction of atypically small right-exit probabilities."""
import math

from rwre import ExitTailQuery, TrapMixture, TrapOverlay, atypical_exit_tail, biased

L, beta, M = 16, 0.5, 10 ** 4
r = math.ceil(L ** beta)
model = TrapMixture(biased(2), TrapOverlay((-r, 0), r, 0.99, 1e-3), 0.01)
rep = atypical_exit_tail(model, ExitTailQuery("slab", 1.0, beta, L, M))
sigma = math.sqrt(0.01 * 0.99 / M)
print(f"fraction below exp(-L^beta): {rep.fraction:.4f}  (weight 0.01, sigma {sigma:.4f})")
