"""Lattice regions and the projections used to describe them.

Every region knows how to label a lattice point as interior, right boundary,
other boundary or left half-space; membership is decided by the compiled
``label_at`` so that walks and solvers agree bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _core
from .errors import BadParameter


def _unit(v, d=None) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise BadParameter("direction must be nonzero")
    if d is not None and v.shape != (d,):
        raise BadParameter(f"direction must have {d} entries")
    return v / n


def axis_vector(d: int, j: int = 0) -> np.ndarray:
    e = np.zeros(d)
    e[j] = 1.0
    return e


# -- projections -------------------------------------------------------------


def proj_l(x, l):
    """Orthogonal projection onto span(l)."""
    x = np.asarray(x, dtype=float)
    return (x @ l)[..., None] * l


def proj_l_perp(x, l):
    x = np.asarray(x, dtype=float)
    return x - proj_l(x, l)


def tilde_proj(x, l, j: int = 0):
    """Projection onto span(l) along the hyperplane {x . e_j = 0}."""
    x = np.asarray(x, dtype=float)
    if l[j] == 0:
        raise BadParameter("l . e_j must be nonzero")
    return (x[..., j] / l[j])[..., None] * l


def tilde_proj_perp(x, l, j: int = 0):
    """x minus :func:`tilde_proj`; its e_j component is zero."""
    x = np.asarray(x, dtype=float)
    return x - tilde_proj(x, l, j)


def on_hyperplane(x, k: int) -> np.ndarray:
    """Membership in H_k = {x . e_1 = k}."""
    return np.asarray(x)[..., 0] == k


# -- region variants ---------------------------------------------------------


class Region:
    """Common behaviour; subclasses define ``d``, ``encode`` and ``bbox``."""

    d: int

    def encode(self) -> tuple[int, np.ndarray]:
        raise NotImplementedError

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        """Inclusive interior bounds per axis (+-inf where unbounded)."""
        raise NotImplementedError

    def wrap(self) -> np.ndarray:
        """Period per axis (0 for non-periodic axes)."""
        return np.zeros(self.d, dtype=np.int64)

    def labels(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        code, rp = self.encode()
        return np.array([_core.label_at(code, rp, p) for p in pts], dtype=np.int8)

    def contains(self, x) -> bool:
        code, rp = self.encode()
        return _core.label_at(code, rp, np.asarray(x, dtype=np.int64)) == _core.INTERIOR

    def right_boundary(self, y) -> bool:
        """True when ``y`` is outside the region on its distinguished side.

        Only meaningful for points of the outer boundary; for those it is
        the ``partial_+`` (right boundary) predicate.
        """
        code, rp = self.encode()
        return _core.label_at(code, rp, np.asarray(y, dtype=np.int64)) == _core.RIGHT

    def to_dict(self) -> dict:
        raise NotImplementedError

    def primary_axis(self) -> int:
        """Lattice axis most aligned with the region's direction."""
        return 0

    def right_corner(self) -> np.ndarray:
        """Minimal corner used to anchor cube tilings of the right boundary.

        Infinite extents anchor at 0 so tilings agree across environments.
        """
        lo, _ = self.bbox()
        return np.where(np.isfinite(lo), lo, 0.0).astype(np.int64)


@dataclass(frozen=True)
class Slab(Region):
    """{-a < x.l < L}, exits at x.l >= L (right) or x.l <= -a (left).

    ``transversal`` is one of ``"unbounded"``, ``"periodic"`` (requires an
    axis-aligned l; transversal coordinates live on Z/width) or
    ``"absorbing"`` (||pi_{l-perp}(x)||_inf > width exits as other boundary).
    """

    l: Sequence[float]
    left_depth: float
    right_level: float
    transversal: str = "unbounded"
    width: int = 0

    def __post_init__(self):
        l = _unit(self.l)
        object.__setattr__(self, "l", tuple(float(c) for c in l))
        if self.left_depth <= 0 or self.right_level <= 0:
            raise BadParameter("slab depths must be positive")
        if self.transversal not in ("unbounded", "periodic", "absorbing"):
            raise BadParameter(f"unknown transversal mode {self.transversal!r}")
        if self.transversal != "unbounded" and self.width < 1:
            raise BadParameter("periodic/absorbing slabs need width >= 1")
        if self.transversal == "periodic" and self.axis is None:
            raise BadParameter("periodic slabs require an axis-aligned direction")

    @property
    def d(self) -> int:
        return len(self.l)

    @property
    def axis(self):
        l = np.asarray(self.l)
        nz = np.flatnonzero(l)
        if len(nz) == 1 and l[nz[0]] == 1.0:
            return int(nz[0])
        return None

    def encode(self):
        mode = {"unbounded": _core.UNBOUNDED, "periodic": _core.PERIODIC,
                "absorbing": _core.ABSORBING}[self.transversal]
        ax = -1 if self.axis is None else self.axis
        rp = np.array([ax, self.left_depth, self.right_level, mode, self.width, *self.l],
                      dtype=float)
        return _core.SLAB, rp

    def bbox(self):
        l = np.asarray(self.l)
        lo = np.full(self.d, -np.inf)
        hi = np.full(self.d, np.inf)
        if self.axis is not None:
            j = self.axis
            lo[j] = math.floor(-self.left_depth) + 1
            hi[j] = math.ceil(self.right_level) - 1
            if self.transversal == "periodic":
                for i in range(self.d):
                    if i != j:
                        lo[i], hi[i] = 0, self.width - 1
            elif self.transversal == "absorbing":
                for i in range(self.d):
                    if i != j:
                        lo[i], hi[i] = -self.width, self.width
        elif self.transversal == "absorbing":
            reach = max(self.left_depth, self.right_level)
            for i in range(self.d):
                lo[i] = math.floor(-reach * abs(l[i]) - self.width)
                hi[i] = math.ceil(reach * abs(l[i]) + self.width)
        return lo, hi

    def primary_axis(self):
        return int(np.argmax(np.abs(self.l)))

    def wrap(self):
        w = np.zeros(self.d, dtype=np.int64)
        if self.transversal == "periodic":
            for i in range(self.d):
                if i != self.axis:
                    w[i] = self.width
        return w

    def to_dict(self):
        return {"type": "slab", "l": list(self.l), "left_depth": self.left_depth,
                "right_level": self.right_level, "transversal": self.transversal,
                "width": self.width}


@dataclass(frozen=True)
class DirectedBox(Region):
    """B_{L,l,K}: 0 <= x.l <= L and ||pi_{l-perp}(x)||_inf <= K L."""

    l: Sequence[float]
    L: float
    K: float

    def __post_init__(self):
        object.__setattr__(self, "l", tuple(float(c) for c in _unit(self.l)))
        if self.L <= 0 or self.K <= 0:
            raise BadParameter("L and K must be positive")

    @property
    def d(self):
        return len(self.l)

    def encode(self):
        return _core.DIRECTED_BOX, np.array([self.L, self.K, *self.l], dtype=float)

    def bbox(self):
        l = np.asarray(self.l)
        w = self.K * self.L
        lo = np.floor(np.minimum(0.0, self.L * l) - w)
        hi = np.ceil(np.maximum(0.0, self.L * l) + w)
        return lo, hi

    def primary_axis(self):
        return int(np.argmax(np.abs(self.l)))

    def to_dict(self):
        return {"type": "directed_box", "l": list(self.l), "L": self.L, "K": self.K}


@dataclass(frozen=True)
class Block(Region):
    """P(x, N): -N^2 < (y-x).e_1 < N^2, ||pi~_{v-perp}(y-x)||_inf < R_6(N) N.

    Right boundary: (y - x).e_1 = N^2. ``width`` overrides R_6(N) N (used
    only by tests that need small blocks).
    """

    anchor: Sequence[int]
    N: int
    vhat: Sequence[float] = None
    width: float = None

    def __post_init__(self):
        anchor = tuple(int(a) for a in self.anchor)
        object.__setattr__(self, "anchor", anchor)
        d = len(anchor)
        v = axis_vector(d) if self.vhat is None else _unit(self.vhat, d)
        if v[0] <= 0:
            raise BadParameter("vhat must have positive e_1 component")
        object.__setattr__(self, "vhat", tuple(float(c) for c in v))
        if self.width is None:
            from .multiscale import scale_R

            object.__setattr__(self, "width", float(scale_R(6, self.N, strict=False) * self.N))

    @property
    def d(self):
        return len(self.anchor)

    def encode(self):
        return _core.BLOCK, np.array([self.N ** 2, self.width, *self.anchor, *self.vhat],
                                     dtype=float)

    def bbox(self):
        v = np.asarray(self.vhat)
        a = np.asarray(self.anchor, dtype=float)
        n2 = self.N ** 2
        slope = v / v[0]
        lo = a + np.minimum(-n2 * slope, n2 * slope) - self.width
        hi = a + np.maximum(-n2 * slope, n2 * slope) + self.width
        lo[0], hi[0] = a[0] - n2 + 1, a[0] + n2 - 1
        return np.floor(lo), np.ceil(hi)

    def right_corner(self):
        v = np.asarray(self.vhat)
        c = np.asarray(self.anchor, dtype=float) + self.N ** 2 * v / v[0] - self.width
        out = np.floor(c).astype(np.int64) + 1
        out[0] = self.anchor[0] + self.N ** 2
        return out

    def in_middle_third(self, y) -> np.ndarray:
        """Membership in P~(x, N) (thirds of both extents, strict)."""
        y = np.atleast_2d(np.asarray(y, dtype=float)) - np.asarray(self.anchor, dtype=float)
        t = tilde_proj_perp(y, np.asarray(self.vhat))
        return (np.abs(y[:, 0]) < self.N ** 2 / 3) & (
            np.max(np.abs(t[:, 1:]), axis=1, initial=0.0) < self.width / 3)

    def middle_third_points(self) -> np.ndarray:
        lo, hi = self.bbox()
        axes = [np.arange(int(a), int(b) + 1) for a, b in zip(lo, hi)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)
        return pts[self.in_middle_third(pts)]

    def to_dict(self):
        return {"type": "block", "anchor": list(self.anchor), "N": self.N,
                "vhat": list(self.vhat), "width": self.width}


@dataclass(frozen=True)
class Cone(Region):
    """C_L: 0 <= x.e_j <= L^{1+delta},
    ||pi~^j_{v-perp}(x)||_inf <= L^{3 delta} + (x.e_j) L^{-2 delta}."""

    L: float
    delta: float
    axis: int = 0
    vhat: Sequence[float] = None
    d_: int = field(default=2, repr=False)

    def __post_init__(self):
        v = axis_vector(self.d_, self.axis) if self.vhat is None else _unit(self.vhat)
        if v[self.axis] <= 0:
            raise BadParameter("vhat . e_j must be positive")
        object.__setattr__(self, "vhat", tuple(float(c) for c in v))
        object.__setattr__(self, "d_", len(v))
        if self.L <= 0 or self.delta <= 0:
            raise BadParameter("L and delta must be positive")

    @property
    def d(self):
        return self.d_

    @property
    def length(self):
        return self.L ** (1 + self.delta)

    def encode(self):
        rp = np.array([self.length, self.L ** (3 * self.delta), self.L ** (-2 * self.delta),
                       self.axis, *self.vhat], dtype=float)
        return _core.CONE, rp

    def bbox(self):
        v = np.asarray(self.vhat)
        lp = self.length
        w = self.L ** (3 * self.delta) + lp * self.L ** (-2 * self.delta)
        slope = v / v[self.axis]
        lo = np.minimum(0.0, lp * slope) - w
        hi = np.maximum(0.0, lp * slope) + w
        lo[self.axis], hi[self.axis] = 0, lp
        return np.floor(lo), np.ceil(hi)

    def primary_axis(self):
        return self.axis

    def to_dict(self):
        return {"type": "cone", "L": self.L, "delta": self.delta, "axis": self.axis,
                "vhat": list(self.vhat)}


@dataclass(frozen=True)
class BoxSpec(Region):
    """B(R, L, L', Lt) = Z^d cap R((-L, L') x (-Lt, Lt)^{d-1}).

    Right part: R(e_1).x >= L' and |R(e_j).x| < Lt for j >= 2.
    """

    R: Sequence[Sequence[float]]
    L: float
    Lp: float
    Lt: float

    def __post_init__(self):
        r = np.asarray(self.R, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise BadParameter("R must be square")
        if not np.allclose(r.T @ r, np.eye(len(r)), atol=1e-12):
            raise BadParameter("R must be orthogonal")
        object.__setattr__(self, "R", tuple(tuple(row) for row in r))

    @classmethod
    def aligned(cls, l, L, Lp, Lt) -> "BoxSpec":
        """Box spec with a rotation taking e_1 to ``l`` (Householder)."""
        l = _unit(l)
        d = len(l)
        e1 = axis_vector(d)
        if np.allclose(l, e1):
            r = np.eye(d)
        else:
            u = e1 - l
            h = np.eye(d) - 2 * np.outer(u, u) / (u @ u)
            r = h.copy()
            # reflection maps e1 -> l; flip another column to get det +1
            r[:, 1] = -r[:, 1]
        return cls(r, L, Lp, Lt)

    @property
    def d(self):
        return len(self.R)

    def encode(self):
        r = np.asarray(self.R, dtype=float)
        return _core.BOX_SPEC, np.concatenate([[self.L, self.Lp, self.Lt], r.ravel()])

    def bbox(self):
        r = np.asarray(self.R, dtype=float)
        ext_lo = np.array([-self.L] + [-self.Lt] * (self.d - 1))
        ext_hi = np.array([self.Lp] + [self.Lt] * (self.d - 1))
        lo = np.minimum(r * ext_lo, r * ext_hi).sum(axis=1)
        hi = np.maximum(r * ext_lo, r * ext_hi).sum(axis=1)
        return np.floor(lo), np.ceil(hi)

    def primary_axis(self):
        return int(np.argmax(np.abs(np.asarray(self.R)[:, 0])))

    def to_dict(self):
        return {"type": "box_spec", "R": [list(r) for r in self.R], "L": self.L,
                "Lp": self.Lp, "Lt": self.Lt}


@dataclass(frozen=True)
class Free(Region):
    """All of Z^d; walks in it stop only at their step cap."""

    dim: int

    @property
    def d(self):
        return self.dim

    def encode(self):
        return _core.FREE, np.zeros(1)

    def bbox(self):
        return np.full(self.d, -np.inf), np.full(self.d, np.inf)

    def to_dict(self):
        return {"type": "free", "d": self.dim}


def region_from_dict(obj: dict) -> Region:
    kind = obj.get("type")
    args = {k: v for k, v in obj.items() if k != "type"}
    if kind == "slab":
        return Slab(**args)
    if kind == "directed_box":
        return DirectedBox(**args)
    if kind == "block":
        return Block(**args)
    if kind == "cone":
        vh = args.get("vhat")
        return Cone(d_=len(vh) if vh else args.pop("d", 2), **args)
    if kind == "box_spec":
        return BoxSpec(**args)
    if kind == "free":
        return Free(args["d"])
    raise BadParameter(f"unknown region type {kind!r}")
