"""Local limit numerics for the one-dimensional simple random walk."""
import math

from rwre import LatticeLaw, llt_discrepancy_report

ns = [64, 100, 144, 196, 256]
rep = llt_discrepancy_report(LatticeLaw.srw(1), ns)
for n, p, d1 in zip(ns, rep.sup_p, rep.sup_first):
    print(f"n={n:4d}  sqrt(n) sup P = {p * math.sqrt(n):.5f}  n sup|D P| = {n * d1:.5f}")
print("fitted exponents:", rep.exponents)
