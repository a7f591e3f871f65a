"""Exact quenched exit quantities by iterative absorption solves.

Two linear systems are solved on an explicit grid around the region:

* backward (harmonic) ``h = P h`` with boundary data, giving right-exit
  probabilities (or any boundary functional) from every interior site;
* adjoint (occupation measure) ``G = delta_start + P^T G``, giving the full
  exit distribution from one start in a single solve.

Both use lexicographic Gauss-Seidel sweeps alternating with reverse sweeps,
or Jacobi, or a sparse LU factorization (``method="direct"``, the default for
the many-column block fields where sweeping is far slower). Unbounded or very large regions are handled by the adjoint solve
on a growing window: interior sites on the window's outer layer absorb mass
as "lost", and faces that lose more than the tolerance are pushed outwards.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from . import _core
from .environment import Environment
from .errors import DegenerateRho, NoConvergence, NoRightExit, RegionTooLarge, StartOutside
from .geometry import Block, BoxSpec, Cone, DirectedBox, Region, Slab

DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 10 ** 6
DEFAULT_MAX_SITES = 10 ** 7
MASS_TOL = 1e-11  # target for |total exit mass - 1|
_WINDOW_SITES = 200_000  # distribution-only solves larger than this use a window
_METHODS = ("gauss_seidel", "jacobi", "direct")
_PERMC = "MMD_AT_PLUS_A"  # about half the fill of COLAMD on lattice grids


@dataclass
class RegionGrid:
    region: Region
    lo: np.ndarray
    shape: np.ndarray
    wrap: np.ndarray  # bool per axis
    labels: np.ndarray  # flat int8
    interior: np.ndarray  # flat cell indices, lexicographic
    cell_to_int: np.ndarray
    nbr: np.ndarray
    probs: np.ndarray

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    def coords(self, flat) -> np.ndarray:
        idx = np.unravel_index(np.asarray(flat, dtype=np.int64), tuple(self.shape))
        return np.stack(idx, axis=-1) + self.lo

    def cell(self, x) -> int:
        x = np.asarray(x, dtype=np.int64) - self.lo
        x = np.where(self.wrap, x % self.shape, x)
        if np.any(x < 0) or np.any(x >= self.shape):
            raise KeyError("point outside grid")
        return int(np.ravel_multi_index(tuple(x), tuple(self.shape)))

    def reachable_boundary(self) -> np.ndarray:
        """Non-interior cells one step from the interior (sorted flat indices)."""
        cells = np.unique(self.nbr)
        return cells[self.cell_to_int[cells] < 0]


def _full_bounds(region: Region):
    lo, hi = region.bbox()
    wrap = region.wrap() > 0
    lo = np.where(wrap, 0, lo - 1)
    hi = np.where(wrap, region.wrap() - 1, hi + 1)
    return lo, hi, wrap


def build_grid(env: Environment, region: Region, lo, hi,
               max_sites: int = DEFAULT_MAX_SITES) -> RegionGrid:
    """Grid on the inclusive box ``[lo, hi]``; interior cells on its outer
    layer (non-periodic axes) are relabelled LOST."""
    wrap = region.wrap() > 0
    lo = np.asarray(lo, dtype=np.int64)
    shape = np.asarray(hi, dtype=np.int64) - lo + 1
    total = int(np.prod(shape.astype(float)))
    if total > 20 * max_sites:
        raise RegionTooLarge(f"grid of {total} cells exceeds the site budget")
    rcode, rp = region.encode()
    labels = _core.labels_on_box(rcode, rp, lo, shape)
    view = labels.reshape(tuple(shape))
    for ax in range(region.d):
        if wrap[ax]:
            continue
        for end in (0, -1):
            face = np.take(view, end, axis=ax)
            face[face == _core.INTERIOR] = _core.LOST
            idx = [slice(None)] * region.d
            idx[ax] = end
            view[tuple(idx)] = face
    interior = np.flatnonzero(labels == _core.INTERIOR)
    if len(interior) > max_sites:
        raise RegionTooLarge(f"{len(interior)} interior sites exceed max_sites={max_sites}")
    cell_to_int = np.full(total, -1, dtype=np.int64)
    cell_to_int[interior] = np.arange(len(interior))
    grid = RegionGrid(region, lo, shape, wrap, labels, interior, cell_to_int, None, None)
    grid.nbr = _core.grid_neighbours(labels, shape, wrap, interior)
    grid.probs = env.kernels(grid.coords(interior)) if len(interior) else np.zeros((0, 2 * region.d))
    return grid


def full_grid(env, region, max_sites=DEFAULT_MAX_SITES) -> RegionGrid:
    lo, hi, _ = _full_bounds(region)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise RegionTooLarge("region is unbounded")
    return build_grid(env, region, lo.astype(np.int64), hi.astype(np.int64), max_sites)


# -- low-level solves --------------------------------------------------------


def _check_method(method):
    if method not in _METHODS:
        raise ValueError(f"method must be one of {_METHODS}")


def _system(grid: RegionGrid):
    """Sparse I - P on interior sites plus the interior-to-boundary coupling."""
    n, nd = grid.nbr.shape
    rows = np.repeat(np.arange(n), nd)
    cells = grid.nbr.ravel()
    cols = grid.cell_to_int[cells]
    vals = grid.probs.ravel()
    inner = cols >= 0
    a = sp.identity(n, format="csc") - sp.csc_matrix(
        (vals[inner], (rows[inner], cols[inner])), shape=(n, n))
    couple = sp.csr_matrix((vals[~inner], (rows[~inner], cells[~inner])),
                           shape=(n, grid.n_cells))
    return a, couple


def harmonic(grid: RegionGrid, boundary_values: np.ndarray, tolerance=DEFAULT_TOL,
             max_iterations=DEFAULT_MAX_ITER, method="gauss_seidel"):
    """Solve ``u = P u`` on the interior with ``u`` fixed elsewhere.

    ``boundary_values`` has shape (n_cells, K); interior rows are the
    starting guess. Returns (u, sweeps, residual).
    """
    _check_method(method)
    u = np.ascontiguousarray(boundary_values, dtype=float)
    if len(grid.interior) == 0:
        return u, 0, 0.0
    inner = tolerance * 0.1
    if method == "direct":
        a, couple = _system(grid)
        u[grid.interior] = spl.splu(a, permc_spec=_PERMC).solve(np.ascontiguousarray(couple @ u))
        it = 1
    elif method == "gauss_seidel":
        it, _ = _core.gs_backward(grid.nbr, grid.probs, grid.interior, u, inner,
                                  max_iterations, True)
    else:
        it, _ = _core.jacobi_backward(grid.nbr, grid.probs, grid.interior, u, inner,
                                      max_iterations)
    res = _core.backward_residual(grid.nbr, grid.probs, grid.interior, u)
    if res > tolerance:
        raise NoConvergence(f"residual {res:.3e} > {tolerance:.1e} after {it} sweeps")
    return u, int(it), float(res)


def occupation(grid: RegionGrid, start_cell: int, tolerance=DEFAULT_TOL,
               max_iterations=DEFAULT_MAX_ITER, method="gauss_seidel"):
    """Expected visits G and absorbed mass per cell for a walk from ``start_cell``.

    Iterates until the relative residual is below ``tolerance`` and the
    absorbed mass is within ``MASS_TOL`` of 1 (or tolerances bottom out).
    """
    _check_method(method)
    inc = _core.incoming_table(grid.nbr, grid.cell_to_int)
    s = int(grid.cell_to_int[start_cell])
    occ = np.zeros(len(grid.interior))
    tol = tolerance * 0.1
    total_it = 0
    if method == "direct":
        a, _ = _system(grid)
        rhs = np.zeros(len(grid.interior))
        rhs[s] = 1.0
        occ = spl.splu(a.T.tocsc(), permc_spec=_PERMC).solve(rhs)
        mass = _core.absorbed_mass(grid.nbr, grid.probs, grid.cell_to_int, occ, grid.n_cells)
        total_it = 1
    while method != "direct":
        budget = max_iterations - total_it
        if budget <= 0:
            break
        if method == "gauss_seidel":
            it, _ = _core.gs_adjoint(inc, grid.probs, s, occ, tol, budget, True)
        else:
            it, _ = _core.jacobi_adjoint(inc, grid.probs, s, occ, tol, budget)
        total_it += int(it)
        mass = _core.absorbed_mass(grid.nbr, grid.probs, grid.cell_to_int, occ, grid.n_cells)
        if abs(mass.sum() - 1.0) <= MASS_TOL or tol < 1e-18:
            break
        tol *= 0.01
    res = _core.adjoint_residual(inc, grid.probs, s, occ)
    if res > tolerance:
        raise NoConvergence(f"adjoint residual {res:.3e} > {tolerance:.1e}")
    return occ, mass, total_it, float(res)


# -- exit solutions ----------------------------------------------------------


@dataclass
class ExitSolution:
    region: Region
    start: tuple
    grid: RegionGrid
    h: np.ndarray | None  # right-exit probability per grid cell (interior solved)
    exit_points: np.ndarray
    exit_probs: np.ndarray
    exit_right: np.ndarray
    lost_mass: float = 0.0
    iterations: dict = field(default_factory=dict)
    residual: dict = field(default_factory=dict)
    method: str = "gauss_seidel"
    windowed: bool = False

    @property
    def right_mass(self) -> float:
        return float(self.exit_probs[self.exit_right].sum())

    @property
    def wrong_mass(self) -> float:
        return float(self.exit_probs[~self.exit_right].sum())

    @property
    def h_start(self) -> float:
        if self.h is not None:
            return float(self.h[self.grid.cell(self.start)])
        return self.right_mass

    def h_at(self, x) -> float:
        if self.h is None:
            raise ValueError("no harmonic field was computed for this solution")
        cell = self.grid.cell(x)
        return float(self.h[cell])

    def distribution(self) -> dict:
        return {tuple(int(c) for c in p): float(q) for p, q in zip(self.exit_points, self.exit_probs)}

    def summary(self) -> dict:
        right, wrong = self.right_mass, self.wrong_mass
        return {"h_start": self.h_start, "rho": wrong / right if right > 0 else None,
                "right_mass": right, "lost_mass": self.lost_mass,
                "total_mass": float(self.exit_probs.sum()) + self.lost_mass,
                "iterations": self.iterations, "residual": self.residual,
                "method": self.method, "windowed": self.windowed,
                "start": list(self.start), "region": self.region.to_dict()}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(self.region.d)] + ["probability", "right_flag"])
            for p, q, r in zip(self.exit_points, self.exit_probs, self.exit_right):
                w.writerow([int(c) for c in p] + [repr(float(q)), int(r)])

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def _distribution(grid: RegionGrid, mass: np.ndarray):
    cells = np.flatnonzero(mass > 0)
    lab = grid.labels[cells]
    keep = lab != _core.LOST
    lost = float(mass[cells[~keep]].sum())
    cells = cells[keep]
    return grid.coords(cells), mass[cells], grid.labels[cells] == _core.RIGHT, lost


def _windowed(env, region, start, tolerance, max_iterations, method, max_sites,
              lost_tolerance, halfwidth, window=None):
    blo, bhi, wrap = _full_bounds(region)
    x = np.asarray(start, dtype=np.int64)
    d = region.d
    if window is None:
        wlo, whi = x - halfwidth, x + halfwidth
    else:
        wlo = np.minimum(np.asarray(window[0]), x - 1)
        whi = np.maximum(np.asarray(window[1]), x + 1)
    lo = np.where(wrap, blo, np.maximum(blo, wlo)).astype(np.int64)
    hi = np.where(wrap, bhi, np.minimum(bhi, whi)).astype(np.int64)
    sweeps = 0
    while True:
        grid = build_grid(env, region, lo, hi, max_sites)
        occ, mass, it, res = occupation(grid, grid.cell(x), tolerance, max_iterations, method)
        sweeps += it
        pts, probs, right, lost = _distribution(grid, mass)
        if lost <= lost_tolerance:
            return grid, pts, probs, right, lost, sweeps, res
        lost_cells = np.flatnonzero((grid.labels == _core.LOST) & (mass > 0))
        lc = grid.coords(lost_cells)
        lm = mass[lost_cells]
        grew = False
        for ax in range(d):
            if wrap[ax]:
                continue
            if lm[lc[:, ax] == lo[ax]].sum() > lost_tolerance / (2 * d):
                lo[ax] = max(blo[ax], x[ax] - 2 * (x[ax] - lo[ax]))
                grew = True
            if lm[lc[:, ax] == hi[ax]].sum() > lost_tolerance / (2 * d):
                hi[ax] = min(bhi[ax], x[ax] + 2 * (hi[ax] - x[ax]))
                grew = True
        if not grew:  # mass spread thinly over every face: grow all of them
            lo = np.where(wrap, lo, np.maximum(blo, x - 2 * (x - lo))).astype(np.int64)
            hi = np.where(wrap, hi, np.minimum(bhi, x + 2 * (hi - x))).astype(np.int64)


def solve_exit(env: Environment, region: Region, start, tolerance: float = DEFAULT_TOL,
               max_iterations: int = DEFAULT_MAX_ITER, method: str = "gauss_seidel",
               max_sites: int = DEFAULT_MAX_SITES, field: bool | None = None,
               lost_tolerance: float = 1e-11, initial_halfwidth: int = 16,
               window=None) -> ExitSolution:
    """Right-exit field and exit distribution of the quenched walk.

    ``field=None`` computes the harmonic field whenever the whole region
    fits on a grid of at most ``_WINDOW_SITES`` cells; larger or unbounded
    regions get the exit distribution from a windowed adjoint solve only.
    Requesting ``field=True`` on a region over ``max_sites`` raises
    :class:`RegionTooLarge`. ``window=(lo, hi)`` sets the first window box
    (default: ``initial_halfwidth`` around the start).
    """
    _check_method(method)
    x = np.asarray(start, dtype=np.int64)
    rcode, rp = region.encode()
    if x.shape != (region.d,) or _core.label_at(rcode, rp, x) != _core.INTERIOR:
        raise StartOutside(f"start {tuple(start)} is not interior to the region")
    start_t = tuple(int(c) for c in x)
    blo, bhi, _ = _full_bounds(region)
    bounded = bool(np.all(np.isfinite(blo)) and np.all(np.isfinite(bhi)))
    cells = float(np.prod(bhi - blo + 1)) if bounded else math.inf
    if field is None:
        field = cells <= _WINDOW_SITES
    if field and not bounded:
        raise RegionTooLarge("harmonic field requested on an unbounded region")
    if field or cells <= _WINDOW_SITES:
        grid = full_grid(env, region, max_sites)
        h = None
        its, resid = {}, {}
        if field:
            bv = (grid.labels == _core.RIGHT).astype(float)[:, None]
            u, it, res = harmonic(grid, bv, tolerance, max_iterations, method)
            h = u[:, 0]
            its["field"], resid["field"] = it, res
        _, mass, it, res = occupation(grid, grid.cell(x), tolerance, max_iterations, method)
        its["distribution"], resid["distribution"] = it, res
        pts, probs, right, lost = _distribution(grid, mass)
        return ExitSolution(region, start_t, grid, h, pts, probs, right, lost, its, resid, method)
    grid, pts, probs, right, lost, it, res = _windowed(
        env, region, x, tolerance, max_iterations, method, max_sites, lost_tolerance,
        initial_halfwidth, window)
    return ExitSolution(region, start_t, grid, None, pts, probs, right, lost,
                        {"distribution": it}, {"distribution": res}, method, True)


def rho_of_box(env: Environment, spec: Region, start=None, **options) -> float:
    """Quenched odds (1 - h(0)) / h(0) of leaving ``spec`` outside its right part."""
    if start is None:
        start = np.zeros(spec.d, dtype=np.int64)
    options.setdefault("field", False)
    sol = solve_exit(env, spec, start, **options)
    right = sol.right_mass
    if right <= 0:
        raise DegenerateRho("right-exit probability is zero")
    return sol.wrong_mass / right


# -- conditioned statistics --------------------------------------------------


def region_scale(region: Region) -> float:
    if isinstance(region, Block):
        return float(region.N)
    if isinstance(region, Slab):
        return float(region.right_level)
    if isinstance(region, (DirectedBox, Cone)):
        return float(region.L)
    if isinstance(region, BoxSpec):
        return float(region.Lp)
    raise ValueError("region has no natural scale")


def cube_side(scale: float, theta: float) -> int:
    return max(1, int(math.ceil(scale ** theta - 1e-12)))


def cube_index(region: Region, points: np.ndarray, side: int) -> np.ndarray:
    """Integer cube coordinates of right-boundary points (primary axis dropped)."""
    ax = region.primary_axis()
    other = [i for i in range(region.d) if i != ax]
    corner = region.right_corner()[other]
    return np.floor_divide(np.asarray(points)[:, other] - corner, side)


@dataclass
class ConditionalExitStats:
    right_mass: float
    expectation: np.ndarray
    variance: float  # E || Z - E Z ||_1^2
    cube_side: int
    cubes: dict  # cube index tuple -> conditioned probability

    def to_dict(self):
        return {"right_mass": self.right_mass, "expectation": self.expectation.tolist(),
                "variance": self.variance, "cube_side": self.cube_side,
                "cubes": [[list(k), v] for k, v in sorted(self.cubes.items())]}


def conditional_exit_stats(sol: ExitSolution, theta: float, scale: float | None = None
                           ) -> ConditionalExitStats:
    """Exit law from the start conditioned on leaving through the right part."""
    if not (0 < theta <= 1):
        raise ValueError("theta must lie in (0, 1]")
    mask = sol.exit_right
    p = float(sol.exit_probs[mask].sum())
    if p <= 0:
        raise NoRightExit("no exit mass on the right boundary")
    q = sol.exit_probs[mask] / p
    y = sol.exit_points[mask].astype(float)
    mean = q @ y
    var = float(q @ np.abs(y - mean).sum(axis=1) ** 2)
    side = cube_side(region_scale(sol.region) if scale is None else scale, theta)
    idx = cube_index(sol.region, sol.exit_points[mask], side)
    cubes: dict = {}
    for key, w in zip(map(tuple, idx.tolist()), q):
        cubes[key] = cubes.get(key, 0.0) + float(w)
    return ConditionalExitStats(p, mean, var, side, cubes)


# -- multi-RHS fields on blocks ----------------------------------------------


@dataclass
class BlockFields:
    """Boundary functionals of the walk from every interior site of a region.

    Columns: right-exit probability, E[(Y - anchor) 1_right] per axis, and
    the probability of exiting through each right-boundary cube.
    """

    grid: RegionGrid
    anchor: np.ndarray
    cube_keys: list
    side: int
    values: np.ndarray  # (n_cells, 1 + d + n_cubes)
    sweeps: int
    residual: float

    def at(self, points) -> np.ndarray:
        """Rows of ``values`` at the given sites (interior points only)."""
        pts = np.atleast_2d(points)
        cells = np.array([self.grid.cell(p) for p in pts], dtype=np.int64)
        return self.values[cells]


def block_fields(env: Environment, region: Region, theta: float, anchor=None,
                 scale: float | None = None, tolerance: float = 1e-10,
                 max_iterations: int = DEFAULT_MAX_ITER, method: str = "direct",
                 max_sites: int = DEFAULT_MAX_SITES, columns: str = "all") -> BlockFields:
    """Right-exit probability, exit expectation and cube laws from all sites.

    ``columns="right"`` solves only the right-exit probability. The default
    sparse LU handles the many right-hand sides at once; iterative methods
    are available for cross-checks.
    """
    grid = full_grid(env, region, max_sites)
    d = region.d
    anchor = np.zeros(d, dtype=np.int64) if anchor is None else np.asarray(anchor, dtype=np.int64)
    side = cube_side(region_scale(region) if scale is None else scale, theta)
    bcells = grid.reachable_boundary()
    rcells = bcells[grid.labels[bcells] == _core.RIGHT]
    rpts = grid.coords(rcells)
    keys = []
    if columns == "all":
        idx = cube_index(region, rpts, side)
        keys = sorted(set(map(tuple, idx.tolist())))
        col_of = {k: i for i, k in enumerate(keys)}
        K = 1 + d + len(keys)
    else:
        K = 1
    bv = np.zeros((grid.n_cells, K))
    bv[rcells, 0] = 1.0
    if columns == "all":
        bv[rcells, 1:1 + d] = rpts - anchor
        for c, key in zip(rcells, map(tuple, idx.tolist())):
            bv[c, 1 + d + col_of[key]] = 1.0
    u, it, res = harmonic(grid, bv, tolerance, max_iterations, method)
    return BlockFields(grid, anchor, keys, side, u, it, res)
