"""Exact lattice convolutions for local-limit checks, and exit-kernel smoothness."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BadParameter, DegenerateLaw, SupportTooLarge

DEFAULT_SUPPORT_CAP = 10 ** 7
MASS_TOL = 1e-12


@dataclass
class LatticeLaw:
    """Finitely supported law on Z^d stored densely on a box.

    ``probs[i]`` is the mass of ``origin + i``; accumulation is in
    extended precision (``np.longdouble``).
    """

    origin: tuple
    probs: np.ndarray

    def __post_init__(self):
        self.origin = tuple(int(c) for c in self.origin)
        self.probs = np.asarray(self.probs, dtype=np.longdouble)
        if self.probs.ndim != len(self.origin):
            raise BadParameter("origin and probability array dimensions differ")
        if np.any(self.probs < 0):
            raise BadParameter("probabilities must be nonnegative")
        if abs(float(self.probs.sum()) - 1.0) > MASS_TOL * max(1, self.probs.ndim):
            raise BadParameter(f"probabilities sum to {float(self.probs.sum())!r}, not 1")

    @classmethod
    def from_dict(cls, masses: dict) -> "LatticeLaw":
        pts = np.array([np.atleast_1d(k) for k in masses], dtype=np.int64)
        if pts.size == 0:
            raise BadParameter("empty law")
        lo = pts.min(axis=0)
        arr = np.zeros(tuple(pts.max(axis=0) - lo + 1), dtype=np.longdouble)
        for p, q in zip(pts, masses.values()):
            arr[tuple(p - lo)] += np.longdouble(q)
        return cls(tuple(lo), arr)

    @classmethod
    def srw(cls, d: int = 1) -> "LatticeLaw":
        m = {}
        for i in range(d):
            for s in (1, -1):
                e = [0] * d
                e[i] = s
                m[tuple(e)] = 1.0 / (2 * d)
        return cls.from_dict(m)

    @property
    def d(self) -> int:
        return len(self.origin)

    def atoms(self) -> list[tuple[tuple, np.longdouble]]:
        idx = np.argwhere(self.probs > 0)
        return [(tuple(int(c) + o for c, o in zip(i, self.origin)), self.probs[tuple(i)])
                for i in idx]

    def to_dict(self) -> dict:
        return {p: float(q) for p, q in self.atoms()}

    def prob(self, x) -> float:
        i = np.asarray(x, dtype=np.int64) - np.asarray(self.origin)
        if np.any(i < 0) or np.any(i >= self.probs.shape):
            return 0.0
        return float(self.probs[tuple(i)])

    def mass(self) -> float:
        return float(self.probs.sum())

    def mean(self) -> np.ndarray:
        grids = np.indices(self.probs.shape)
        return np.array([float((self.probs * (g + o)).sum()) for g, o in zip(grids, self.origin)])

    def is_degenerate(self) -> bool:
        return int(np.count_nonzero(self.probs)) <= 1

    def parity_periodic(self) -> bool:
        """True when every atom has the same coordinate-sum parity."""
        par = {sum(p) % 2 for p, _ in self.atoms()}
        return len(par) == 1


def convolve(a: LatticeLaw, b: LatticeLaw, cap: int = DEFAULT_SUPPORT_CAP) -> LatticeLaw:
    """Law of the sum of independent draws from ``a`` and ``b`` (shift-add over atoms of b)."""
    if a.d != b.d:
        raise BadParameter("dimension mismatch")
    shape = tuple(sa + sb - 1 for sa, sb in zip(a.probs.shape, b.probs.shape))
    if int(np.prod(shape, dtype=np.float64)) > cap:
        raise SupportTooLarge(f"support box {shape} exceeds cap {cap}")
    out = np.zeros(shape, dtype=np.longdouble)
    for idx in np.argwhere(b.probs > 0):
        sl = tuple(slice(int(i), int(i) + s) for i, s in zip(idx, a.probs.shape))
        out[sl] += a.probs * b.probs[tuple(idx)]
    return LatticeLaw(tuple(x + y for x, y in zip(a.origin, b.origin)), out)


def convolve_power(law: LatticeLaw, n: int, cap: int = DEFAULT_SUPPORT_CAP) -> LatticeLaw:
    """Exact law of Y_1 + ... + Y_n for i.i.d. Y_i with the given law."""
    if n < 1:
        raise BadParameter("n must be >= 1")
    need = np.prod([(s - 1) * n + 1 for s in law.probs.shape], dtype=np.float64)
    if need > cap:
        raise SupportTooLarge(f"support box of size {need:.3g} exceeds cap {cap}")
    out = law
    for _ in range(n - 1):
        out = convolve(out, law, cap)
    return out


# -- discrepancy report ------------------------------------------------------


def _shift_diff(p: np.ndarray, axis: int, step: int) -> np.ndarray:
    """p(x + step e_axis) - p(x) over the padded support."""
    pad = [(0, 0)] * p.ndim
    pad[axis] = (step, step)
    q = np.pad(p, pad)
    n = q.shape[axis]
    a = np.take(q, np.arange(step, n), axis=axis)
    b = np.take(q, np.arange(0, n - step), axis=axis)
    return a - b


def difference_sups(p: np.ndarray, step: int = 1) -> tuple[float, float, float | None]:
    """sup |D_i p|, sup |D_i D_i p|, sup |D_i D_j p| (i != j) with step ``step``."""
    first = second = 0.0
    mixed = None
    for i in range(p.ndim):
        d1 = _shift_diff(p, i, step)
        first = max(first, float(np.abs(d1).max()))
        second = max(second, float(np.abs(_shift_diff(d1, i, step)).max()))
        for j in range(i + 1, p.ndim):
            m = float(np.abs(_shift_diff(d1, j, step)).max())
            mixed = m if mixed is None else max(mixed, m)
    return first, second, mixed


@dataclass
class LLTReport:
    n_grid: tuple
    d: int
    parity_class: bool  # differences taken with step 2 inside one parity class
    sup_p: list
    sup_first: list
    sup_second: list
    sup_mixed: list
    exponents: dict  # statistic -> fitted decay exponent

    def rows(self) -> list[dict]:
        out = []
        for k, n in enumerate(self.n_grid):
            for name, vals in (("sup_p", self.sup_p), ("sup_first", self.sup_first),
                               ("sup_second", self.sup_second), ("sup_mixed", self.sup_mixed)):
                if vals[k] is not None:
                    out.append({"n": n, "statistic": name, "value": vals[k]})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["n", "statistic", "value"], lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({**r, "value": repr(r["value"])})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"n_grid": list(self.n_grid), "d": self.d, "parity_class": self.parity_class,
                "sup_p": self.sup_p, "sup_first": self.sup_first,
                "sup_second": self.sup_second, "sup_mixed": self.sup_mixed,
                "exponents": self.exponents}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _decay_exponent(ns, vals) -> float | None:
    if any(v is None or v <= 0 for v in vals):
        return None
    return float(-np.polyfit(np.log(ns), np.log(vals), 1)[0])


def llt_discrepancy_report(law: LatticeLaw, n_grid, cap: int = DEFAULT_SUPPORT_CAP
                           ) -> LLTReport:
    """Sup of the n-step law and of its discrete derivatives over a grid of n.

    Parity-periodic laws (e.g. simple random walk) live on one parity
    class at each n; differences then use steps of 2 so they stay inside
    that class. Exponents are least-squares slopes of -log(sup) vs log n.
    """
    n_grid = tuple(int(n) for n in n_grid)
    if len(n_grid) < 3 or any(b <= a for a, b in zip(n_grid, n_grid[1:])) or n_grid[0] < 1:
        raise BadParameter("n_grid must be increasing with at least 3 positive points")
    if law.is_degenerate():
        raise DegenerateLaw("single-atom law")
    periodic = law.parity_periodic()
    step = 2 if periodic else 1
    sup_p, s1, s2, sm = [], [], [], []
    cur, k = law, 1
    for n in n_grid:
        while k < n:
            cur = convolve(cur, law, cap)
            k += 1
        p = cur.probs.astype(np.float64)
        a, b, c = difference_sups(p, step)
        sup_p.append(float(p.max()))
        s1.append(a)
        s2.append(b)
        sm.append(c)
    ns = np.array(n_grid, dtype=float)
    expo = {"sup_p": _decay_exponent(ns, sup_p), "sup_first": _decay_exponent(ns, s1),
            "sup_second": _decay_exponent(ns, s2), "sup_mixed": _decay_exponent(ns, sm)}
    return LLTReport(n_grid, law.d, periodic, sup_p, s1, s2, sm, expo)


# -- exit-kernel smoothness --------------------------------------------------


@dataclass
class ExitKernelReport:
    L_grid: tuple
    d: int
    sup_nu: list
    sup_diff: list
    scaled_sup: list  # L^{d-1} sup nu
    scaled_diff: list  # L^d sup |nu(y) - nu(y +- e_j)|
    right_mass: list
    total_nu: list
    laws: list = field(default_factory=list, repr=False)

    def rows(self) -> list[dict]:
        return [{"L": L, "sup_nu": a, "sup_diff": b, "scaled_sup": c, "scaled_diff": e,
                 "right_mass": r} for L, a, b, c, e, r in
                zip(self.L_grid, self.sup_nu, self.sup_diff, self.scaled_sup,
                    self.scaled_diff, self.right_mass)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"L_grid": list(self.L_grid), "rows": self.rows(), "total_nu": self.total_nu}


def _table_sups(table: dict, d: int) -> tuple[float, float]:
    sup = max(table.values())
    diff = 0.0
    for y, v in table.items():
        for j in range(1, d):
            for s in (1, -1):
                z = list(y)
                z[j] += s
                diff = max(diff, abs(v - table.get(tuple(z), 0.0)))
    return sup, diff


def exit_kernel_smoothness(model, L_grid, M: int, seed: int = 0, workers: int = 1,
                           **solve_options) -> ExitKernelReport:
    """Annealed exit law nu on the right face of P(0, L) and its transversal differences."""
    from .exit_stats import annealed_exit_law

    L_grid = tuple(int(L) for L in L_grid)
    d = model.d
    out = ExitKernelReport(L_grid, d, [], [], [], [], [], [])
    for L in L_grid:
        law = annealed_exit_law(model, L, M, seed=seed, workers=workers, **solve_options)
        sup, diff = _table_sups(law.table(), d)
        out.sup_nu.append(sup)
        out.sup_diff.append(diff)
        out.scaled_sup.append(L ** (d - 1) * sup)
        out.scaled_diff.append(L ** d * diff)
        out.right_mass.append(law.right_mass)
        out.total_nu.append(float(law.probs.sum()))
        out.laws.append(law)
    return out
