"""I.i.d. uniformly elliptic environments on Z^d.

An :class:`Environment` is never materialized: the kernel at a site is a pure
function of ``(master_seed, site)`` computed by a counter-based hash, so the
same site always yields bitwise-identical probabilities regardless of query
order or thread.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _core
from ._parallel import ordered_map
from .errors import ModelInvalid, OverlayInvalid

_MASK = (1 << 64) - 1
_SUM_TOL = 1e-12
MAX_DIRICHLET_SHAPE = float(_core._MAX_INT_SHAPE)


def _mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _tag(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK
    digest = hashlib.blake2b(str(part).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(master: int, *parts) -> int:
    """Hash ``master`` with any number of integer or string tags.

    Used for per-replica seeds: ``derive_seed(seed, "tails", i)``. Never
    depends on evaluation order of other replicas.
    """
    h = _mix64(int(master) & _MASK)
    for p in parts:
        h = _mix64(h ^ ((_tag(p) + 0x9E3779B97F4A7C15) & _MASK))
    return h


def _check_kernel(probs, d, kappa, test_mode, what="kernel") -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.shape != (2 * d,):
        raise ModelInvalid(f"{what} must have {2 * d} entries, got {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ModelInvalid(f"{what} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > _SUM_TOL:
        raise ModelInvalid(f"{what} sums to {p.sum()!r}, not 1")
    if not test_mode and np.any(p < kappa):
        raise ModelInvalid(f"{what} violates ellipticity floor {kappa}")
    return p


# -- variants ----------------------------------------------------------------


@dataclass(frozen=True)
class Deterministic:
    """Every site carries the same kernel."""

    kernel: Sequence[float]

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(float(v) for v in self.kernel))

    def encode(self, d):
        return _core.DETERMINISTIC, np.array(self.kernel, dtype=float)

    def to_dict(self):
        return {"type": "deterministic", "kernel": list(self.kernel)}


@dataclass(frozen=True)
class PerturbedSRW:
    """SRW kernel with ``+eps*U`` moved from ``-e_axis`` to ``+e_axis``, U ~ U(0,1)."""

    epsilon: float
    axis: int = 0

    def encode(self, d):
        return _core.PERTURBED_SRW, np.array([self.epsilon, self.axis], dtype=float)

    def to_dict(self):
        return {"type": "perturbed_srw", "epsilon": self.epsilon, "axis": self.axis}


@dataclass(frozen=True)
class TwoPointMixture:
    """Kernel ``kernel_plus`` with probability ``p_mix``, else ``kernel_minus``."""

    kernel_plus: Sequence[float]
    kernel_minus: Sequence[float]
    p_mix: float

    def __post_init__(self):
        object.__setattr__(self, "kernel_plus", tuple(float(v) for v in self.kernel_plus))
        object.__setattr__(self, "kernel_minus", tuple(float(v) for v in self.kernel_minus))

    def encode(self, d):
        mp = np.concatenate([[self.p_mix], self.kernel_plus, self.kernel_minus])
        return _core.TWO_POINT, mp.astype(float)

    def to_dict(self):
        return {"type": "two_point", "kernel_plus": list(self.kernel_plus),
                "kernel_minus": list(self.kernel_minus), "p_mix": self.p_mix}


@dataclass(frozen=True)
class DirichletSites:
    """Kernel ``kappa + (1 - 2d kappa) * Dirichlet(alpha)`` at every site.

    Gamma variates come from a rejection-free sampler (sum of exponentials
    for the integer part of the shape, inverse CDF for the fractional part),
    so each site consumes a fixed number of hashed uniforms.
    """

    alpha: Sequence[float]

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(v) for v in self.alpha))

    def encode(self, d):
        return _core.DIRICHLET, None  # needs kappa; filled by the model

    def to_dict(self):
        return {"type": "dirichlet", "alpha": list(self.alpha)}


_VARIANTS = {
    "deterministic": Deterministic,
    "perturbed_srw": PerturbedSRW,
    "two_point": TwoPointMixture,
    "dirichlet": DirichletSites,
}


# -- models ------------------------------------------------------------------


@dataclass(frozen=True)
class EnvironmentModel:
    """Law of an i.i.d. environment: dimension, ellipticity floor and variant.

    ``test_mode`` admits degenerate kernels (``kappa = 0``, zero entries)
    for oracle tests.
    """

    d: int
    kappa: float
    variant: object
    test_mode: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        d, kappa = self.d, self.kappa
        if not isinstance(d, (int, np.integer)) or d < 2:
            raise ModelInvalid("dimension must be an integer >= 2")
        if not (0.0 <= kappa <= 1.0 / (2 * d)):
            raise ModelInvalid(f"kappa must lie in [0, 1/(2d)], got {kappa}")
        if kappa == 0.0 and not self.test_mode:
            raise ModelInvalid("kappa = 0 requires test_mode")
        v = self.variant
        tm = self.test_mode
        if isinstance(v, Deterministic):
            _check_kernel(v.kernel, d, kappa, tm)
        elif isinstance(v, PerturbedSRW):
            if not (0 <= v.axis < d):
                raise ModelInvalid("drift axis out of range")
            if v.epsilon < 0 or 1.0 / (2 * d) - v.epsilon < (0.0 if tm else kappa):
                raise ModelInvalid("epsilon too large for the ellipticity floor")
        elif isinstance(v, TwoPointMixture):
            if not (0.0 <= v.p_mix <= 1.0):
                raise ModelInvalid("p_mix must lie in [0, 1]")
            _check_kernel(v.kernel_plus, d, kappa, tm, "kernel_plus")
            _check_kernel(v.kernel_minus, d, kappa, tm, "kernel_minus")
        elif isinstance(v, DirichletSites):
            a = np.asarray(v.alpha)
            if a.shape != (2 * d,) or np.any(a <= 0) or np.any(a > MAX_DIRICHLET_SHAPE):
                raise ModelInvalid(
                    f"Dirichlet concentrations must be 2d values in (0, {MAX_DIRICHLET_SHAPE:g}]")
        else:
            raise ModelInvalid(f"unknown variant {type(v).__name__}")

    def encode(self) -> tuple[int, np.ndarray]:
        if isinstance(self.variant, DirichletSites):
            return _core.DIRICHLET, np.array([self.kappa, *self.variant.alpha], dtype=float)
        return self.variant.encode(self.d)

    @property
    def is_deterministic(self) -> bool:
        return isinstance(self.variant, Deterministic)

    @property
    def fingerprint(self) -> str:
        """Stable description of the law; equal models share it."""
        return json.dumps(self.to_dict(), sort_keys=True)

    def sample(self, seed: int) -> "Environment":
        return build_environment(self, seed)

    def drift(self) -> np.ndarray | None:
        """Mean local drift E[sum_e omega(0,e) e] when known in closed form."""
        v = self.variant
        if isinstance(v, Deterministic):
            return _kernel_drift(np.asarray(v.kernel), self.d)
        if isinstance(v, PerturbedSRW):
            m = np.zeros(self.d)
            m[v.axis] = v.epsilon  # E[2 eps U] = eps
            return m
        if isinstance(v, TwoPointMixture):
            return (v.p_mix * _kernel_drift(np.asarray(v.kernel_plus), self.d)
                    + (1 - v.p_mix) * _kernel_drift(np.asarray(v.kernel_minus), self.d))
        a = np.asarray(v.alpha)
        mean = self.kappa + (1 - 2 * self.d * self.kappa) * a / a.sum()
        return _kernel_drift(mean, self.d)

    def to_dict(self) -> dict:
        out = {"d": int(self.d), "kappa": self.kappa, "variant": self.variant.to_dict()}
        if self.test_mode:
            out["test_mode"] = True
        return out


def _kernel_drift(p, d):
    return np.array([p[2 * i] - p[2 * i + 1] for i in range(d)])


def srw(d: int = 2) -> EnvironmentModel:
    """Simple symmetric random walk as a deterministic environment."""
    return EnvironmentModel(d, 1.0 / (2 * d), Deterministic([1.0 / (2 * d)] * (2 * d)))


def biased(d: int = 2, p: float = 0.4, q: float = 0.2, rest: float = None) -> EnvironmentModel:
    """Deterministic kernel with ``p`` on +e_1, ``q`` on -e_1, the rest equal."""
    if rest is None:
        rest = float(f"{(1.0 - p - q) / (2 * d - 2):.15g}")  # 0.2, not 0.19999999999999998
    k = [p, q] + [rest] * (2 * d - 2)
    return EnvironmentModel(d, min(k), Deterministic(k))


# -- environments ------------------------------------------------------------


@dataclass(frozen=True)
class TrapOverlay:
    """Inward-biased l1 ball: inside it (centre excluded) the inward
    directions share ``inward_bias`` equally and the others share the rest."""

    center: Sequence[int]
    radius: int
    inward_bias: float
    floor: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))
        d = len(self.center)
        if self.radius < 0 or int(self.radius) != self.radius:
            raise OverlayInvalid("radius must be a nonnegative integer")
        if not (0.0 < self.floor <= 1.0 / (2 * d)):
            raise OverlayInvalid("floor must lie in (0, 1/(2d)]")
        if not (d * self.floor <= self.inward_bias <= 1.0 - (2 * d - 1) * self.floor):
            raise OverlayInvalid(
                f"inward_bias {self.inward_bias} incompatible with floor {self.floor}")

    def encode(self) -> np.ndarray:
        return np.array([self.radius, self.inward_bias, self.floor, *self.center], dtype=float)

    def to_dict(self):
        return {"center": list(self.center), "radius": int(self.radius),
                "inward_bias": self.inward_bias, "floor": self.floor}


@dataclass(frozen=True)
class Environment:
    """A quenched environment: model, seed and any trap overlays."""

    model: EnvironmentModel
    master_seed: int
    traps: tuple = field(default=())

    @property
    def d(self) -> int:
        return self.model.d

    @property
    def kappa(self) -> float:
        return min([self.model.kappa] + [t.floor for t in self.traps])

    @property
    def key(self) -> np.uint64:
        return np.uint64(_mix64(int(self.master_seed) ^ 0x5EED5EED5EED5EED))

    def encode(self):
        """(model code, model params, trap array, env key) for compiled code."""
        mcode, mp = self.model.encode()
        traps = np.array([t.encode() for t in self.traps], dtype=float).reshape(
            len(self.traps), 3 + self.d)
        return mcode, mp, traps, self.key

    def site_kernel(self, x) -> np.ndarray:
        return self.kernels(np.asarray(x, dtype=np.int64)[None, :])[0]

    def kernels(self, points) -> np.ndarray:
        """Kernels at an (n, d) array of sites, one row each."""
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.int64)
        if pts.shape[1] != self.d:
            raise ValueError(f"points must have {self.d} columns")
        mcode, mp, traps, key = self.encode()
        return _core.kernels_at_points(mcode, mp, traps, key, pts)

    @property
    def is_homogeneous(self) -> bool:
        return self.model.is_deterministic and not self.traps


def build_environment(model: EnvironmentModel, seed: int) -> Environment:
    model.validate()
    return Environment(model, int(seed) & _MASK)


def apply_trap(env: Environment, overlay: TrapOverlay) -> Environment:
    if len(overlay.center) != env.d:
        raise OverlayInvalid("overlay centre has the wrong dimension")
    return Environment(env.model, env.master_seed, env.traps + (overlay,))


@dataclass(frozen=True)
class TrapMixture:
    """Environment law: ``base`` with ``overlay`` applied with probability ``weight``.

    Whether a given seed is trapped is a pure function of the seed.
    """

    base: EnvironmentModel
    overlay: TrapOverlay
    weight: float

    def __post_init__(self):
        if not (0.0 <= self.weight <= 1.0):
            raise ModelInvalid("mixture weight must lie in [0, 1]")
        if len(self.overlay.center) != self.base.d:
            raise ModelInvalid("overlay dimension differs from the base model")

    @property
    def d(self):
        return self.base.d

    @property
    def kappa(self):
        return min(self.base.kappa, self.overlay.floor)

    @property
    def test_mode(self):
        return self.base.test_mode

    @property
    def is_deterministic(self):
        return False

    @property
    def fingerprint(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def drift(self):
        return self.base.drift()

    def is_trapped(self, seed: int) -> bool:
        u = (derive_seed(seed, "trap-mixture") >> 11) * 2.0 ** -53
        return u < self.weight

    def sample(self, seed: int) -> Environment:
        env = build_environment(self.base, seed)
        return apply_trap(env, self.overlay) if self.is_trapped(seed) else env

    def to_dict(self):
        out = self.base.to_dict()
        out["trap_mixture"] = {"weight": self.weight, "overlay": self.overlay.to_dict()}
        return out


def kernel_class(model, seed):
    """Key shared by seeds whose environments carry identical kernels, or None.

    Deterministic models have one class; trap mixtures over a deterministic
    base have two (trapped or not). Other models get None (no sharing).
    """
    if isinstance(model, TrapMixture):
        return ("trap", model.is_trapped(seed)) if model.base.is_deterministic else None
    return ("det",) if model.is_deterministic else None


def map_environments(fn, model, seeds, workers: int = 1) -> list:
    """``[fn(model.sample(s)) for s in seeds]``, evaluated once per kernel class."""
    seeds = list(seeds)
    if seeds and kernel_class(model, seeds[0]) is not None:
        cache = {}
        out = []
        for s in seeds:
            key = kernel_class(model, s)
            if key not in cache:
                cache[key] = fn(model.sample(s))
            out.append(cache[key])
        return out
    return ordered_map(lambda s: fn(model.sample(s)), seeds, workers)


# -- serialization -----------------------------------------------------------


_MODEL_KEYS = {"d", "kappa", "variant", "seed", "test_mode", "trap_mixture"}


def model_from_dict(obj: dict):
    """Parse ``{"d", "kappa", "variant": {"type", ...}}`` (plus optional
    ``test_mode`` and ``trap_mixture``). Returns (model, seed or None)."""
    unknown = set(obj) - _MODEL_KEYS
    if unknown:
        raise ModelInvalid(f"unknown model keys {sorted(unknown)}")
    try:
        var = dict(obj["variant"])
        kind = var.pop("type")
        cls = _VARIANTS[kind]
    except KeyError as exc:
        raise ModelInvalid(f"bad variant description: {exc}") from None
    try:
        variant = cls(**var)
    except TypeError as exc:
        raise ModelInvalid(str(exc)) from None
    model = EnvironmentModel(int(obj["d"]), float(obj["kappa"]), variant,
                             bool(obj.get("test_mode", False)))
    if "trap_mixture" in obj:
        tm = obj["trap_mixture"]
        model = TrapMixture(model, TrapOverlay(**tm["overlay"]), float(tm["weight"]))
    return model, obj.get("seed")


def model_to_json(model, seed=None) -> str:
    obj = model.to_dict()
    if seed is not None:
        obj["seed"] = int(seed)
    return json.dumps(obj, sort_keys=True)


def model_from_json(text: str):
    return model_from_dict(json.loads(text))
