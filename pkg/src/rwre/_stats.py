"""Small statistical helpers shared by the report builders."""
from __future__ import annotations

import math

import numpy as np

Z3 = 3.0


def wilson(k: int, n: int, z: float = Z3) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion.

    Zero counts use the rule of three, ``[0, 3/n]``.
    """
    if n <= 0:
        return 0.0, 1.0
    if k == 0:
        return 0.0, min(1.0, 3.0 / n)
    p = k / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


def binomial_se(k: int, n: int) -> float:
    p = k / n
    return math.sqrt(p * (1 - p) / n)


def mean_ci(x, z: float = 1.96) -> tuple[float, float]:
    """Mean and normal-approximation half width."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()) if x.size else float("nan"), 0.0
    return float(x.mean()), float(z * x.std(ddof=1) / math.sqrt(x.size))


def ratio_ci(num, den, z: float = 1.96):
    """Ratio of means with a delta-method half width.

    ``num`` may have trailing dimensions; ``den`` is one value per sample.
    """
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    m = den.shape[0]
    dbar = den.mean()
    if dbar == 0:
        return np.full(num.shape[1:], np.nan), np.full(num.shape[1:], np.nan)
    r = num.mean(axis=0) / dbar
    if m < 2:
        return r, np.zeros_like(r)
    shape = (m,) + (1,) * (num.ndim - 1)
    resid = num - r * den.reshape(shape)
    se = resid.std(axis=0, ddof=1) / math.sqrt(m) / abs(dbar)
    return r, z * se


def loglog_slope(x, y) -> float:
    """Least-squares slope of log y against log x."""
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


def bootstrap(values, stat, n_resamples: int = 1000, seed: int = 0, level: float = 0.95):
    """Percentile bootstrap interval of ``stat`` over the first axis of ``values``."""
    values = np.asarray(values)
    rng = np.random.default_rng(seed)
    n = values.shape[0]
    draws = np.empty(n_resamples)
    for b in range(n_resamples):
        draws[b] = stat(values[rng.integers(0, n, n)])
    lo, hi = np.quantile(draws, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi), float(draws.std(ddof=1))
