"""Quenched trajectories, regeneration structure and direction estimates."""
from __future__ import annotations

import base64
import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _core
from ._parallel import chunks, ordered_map
from ._stats import wilson
from .environment import Environment, derive_seed
from .errors import BadParameter, InsufficientData, StartOutside
from .geometry import Free, Region, Slab

_CHUNK = 256


class StopReason(str, Enum):
    RIGHT = "RightBoundary"
    OTHER = "OtherBoundary"
    LEFT = "LeftHalfspace"
    CAP = "StepCap"


_LABEL_REASON = {_core.RIGHT: StopReason.RIGHT, _core.OTHER: StopReason.OTHER,
                 _core.LEFT: StopReason.LEFT, _core.INTERIOR: StopReason.CAP}


def walk_key(master_seed: int, stream_id: int) -> np.uint64:
    return np.uint64(derive_seed(master_seed, "walk", stream_id))


@dataclass
class Trajectory:
    start: tuple
    moves: np.ndarray  # uint8 direction codes
    stop_reason: StopReason
    stream_id: int = 0

    @property
    def d(self) -> int:
        return len(self.start)

    def __len__(self):
        return len(self.moves)

    def positions(self) -> np.ndarray:
        return _core.positions_from_moves(np.asarray(self.start, dtype=np.int64),
                                          self.moves, len(self.moves))

    @property
    def end(self) -> np.ndarray:
        return self.positions()[-1]

    _REASONS = list(StopReason)

    def to_bytes(self) -> bytes:
        """``<d, stream_id, reason, n>`` header, start coords, move bytes."""
        head = struct.pack("<BqBq", self.d, self.stream_id,
                           self._REASONS.index(self.stop_reason), len(self.moves))
        return head + struct.pack(f"<{self.d}q", *self.start) + self.moves.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Trajectory":
        d, sid, reason, n = struct.unpack_from("<BqBq", blob)
        off = struct.calcsize("<BqBq")
        start = struct.unpack_from(f"<{d}q", blob, off)
        off += 8 * d
        moves = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off).copy()
        return cls(tuple(start), moves, cls._REASONS[reason], sid)

    def to_json(self) -> str:
        return json.dumps({"start": list(self.start), "moves": self.moves.tolist(),
                           "stop_reason": self.stop_reason.value,
                           "stream_id": self.stream_id})

    @classmethod
    def from_json(cls, text: str) -> "Trajectory":
        o = json.loads(text)
        return cls(tuple(o["start"]), np.asarray(o["moves"], dtype=np.uint8),
                   StopReason(o["stop_reason"]), o["stream_id"])

    def encode_b64(self) -> str:
        return base64.b64encode(self.to_bytes()).decode()


def _check_start(region: Region, start) -> np.ndarray:
    x = np.asarray(start, dtype=np.int64)
    if x.shape != (region.d,):
        raise StartOutside(f"start must have {region.d} coordinates")
    code, rp = region.encode()
    if _core.label_at(code, rp, x) != _core.INTERIOR:
        raise StartOutside(f"start {tuple(x)} is not interior to the region")
    return x


def simulate(env: Environment, start, region: Region, step_cap: int,
             stream_id: int = 0) -> Trajectory:
    """One quenched walk from ``start`` until it leaves ``region`` or hits the cap."""
    if step_cap < 1:
        raise BadParameter("step_cap must be >= 1")
    x = _check_start(region, start)
    mcode, mp, traps, key = env.encode()
    rcode, rp = region.encode()
    moves = np.zeros(step_cap, dtype=np.uint8)
    n, lab, _ = _core.walk(mcode, mp, traps, key, region.wrap(), rcode, rp, x,
                           step_cap, walk_key(env.master_seed, stream_id), moves, True)
    return Trajectory(tuple(int(v) for v in x), moves[:n].copy(), _LABEL_REASON[lab], stream_id)


@dataclass
class BatchResult:
    steps: np.ndarray
    labels: np.ndarray
    finals: np.ndarray
    moves: np.ndarray | None = None


def run_replicas(model, seeds, region: Region, start, step_cap: int,
                 record: bool = False, stream_id: int = 0) -> BatchResult:
    """One walk per environment seed (annealed sampling), all from ``start``.

    ``model`` may be an :class:`EnvironmentModel` or a trap mixture; any
    object with ``sample(seed)`` works.
    """
    x = _check_start(region, start)
    seeds = [int(s) for s in seeds]
    if not seeds:
        return BatchResult(np.zeros(0, np.int64), np.zeros(0, np.int8),
                           np.zeros((0, region.d), np.int64))
    envs = [model.sample(s) for s in seeds]
    mcode, mp, _, _ = envs[0].encode()
    trap_rows = [e.encode()[2] for e in envs if e.traps]
    traps = trap_rows[0] if trap_rows else np.zeros((0, 3 + region.d))
    trapped = np.array([bool(e.traps) for e in envs], dtype=np.uint8)
    env_keys = np.array([e.key for e in envs], dtype=np.uint64)
    wkeys = np.array([walk_key(s, stream_id) for s in seeds], dtype=np.uint64)
    rcode, rp = region.encode()
    moves = (np.zeros((len(seeds), step_cap), dtype=np.uint8) if record
             else np.zeros((1, 1), dtype=np.uint8))
    steps, labels, finals = _core.walk_batch(mcode, mp, traps, trapped, env_keys, wkeys,
                                             region.wrap(), rcode, rp, x, step_cap, moves)
    return BatchResult(steps, labels, finals, moves if record else None)


def replica_seeds(seed: int, tag: str, indices) -> list[int]:
    return [derive_seed(seed, tag, i) for i in indices]


# -- directional escape ------------------------------------------------------


@dataclass
class DirectionalReport:
    l: tuple
    b: float
    L: float
    M: int
    count: int  # walks crossing {x.l <= -bL} before {x.l >= L}
    censored: int
    estimate: float
    ci_low: float
    ci_high: float

    def to_dict(self):
        return dict(self.__dict__, l=list(self.l))


def directional_report(model, l, b: float, L: float, M: int, seed: int = 0,
                       step_cap: int = 10 ** 7, workers: int = 1) -> DirectionalReport:
    """Annealed estimate of P_0(T_L^l > T_{bL}^{-l}) with a 3-sigma Wilson interval.

    Each replica samples a fresh environment. ``step_cap`` is a safety
    net; capped walks are reported as censored and excluded from the count.
    """
    if b <= 0:
        raise BadParameter("b must be positive")
    if M < 1:
        raise BadParameter("M must be >= 1")
    region = Slab(l, b * L, L)
    start = np.zeros(model.d, dtype=np.int64)

    def job(rng):
        res = run_replicas(model, replica_seeds(seed, "directional", rng), region,
                           start, step_cap)
        return (int(np.sum(res.labels == _core.LEFT)),
                int(np.sum(res.labels == _core.INTERIOR)))

    parts = ordered_map(job, chunks(M, 4 * _CHUNK), workers)
    count = sum(p[0] for p in parts)
    censored = sum(p[1] for p in parts)
    n = M - censored
    lo, hi = wilson(count, n)
    return DirectionalReport(tuple(region.l), b, L, M, count, censored,
                             count / n if n else float("nan"), lo, hi)


# -- regenerations -----------------------------------------------------------


@dataclass
class RegenerationRecord:
    times: np.ndarray
    positions: np.ndarray
    radii: np.ndarray
    confirmed: np.ndarray
    horizon: int

    @property
    def censored(self) -> bool:
        return bool(len(self.confirmed) and not self.confirmed.all())

    @property
    def n_confirmed(self) -> int:
        return int(self.confirmed.sum())


def _record_from_positions(pos: np.ndarray, horizon: int) -> RegenerationRecord:
    times, radii, conf = _core.regen_scan(pos, horizon)
    return RegenerationRecord(times, pos[times], radii, conf, horizon)


def regeneration_decompose(traj: Trajectory, confirm_horizon: int) -> RegenerationRecord:
    """Finite-horizon regeneration times of ``traj``.

    Time ``n >= 1`` is accepted when X_n . e_1 is a strict running maximum
    and no point up to ``min(end, n + confirm_horizon)`` falls below it.
    Accepted times with ``n + confirm_horizon`` beyond the end are kept but
    flagged unconfirmed, which makes the record censored.
    """
    if len(traj) == 0:
        raise BadParameter("trajectory is empty")
    return _record_from_positions(traj.positions(), int(confirm_horizon))


def check_event_A_N(record: RegenerationRecord, N: int) -> bool:
    """True iff the first 2N^2 radii are all strictly below R_2(N)."""
    from .multiscale import scale_R

    need = 2 * N * N
    conf = record.confirmed
    if len(conf) < need or not conf[:need].all():
        raise InsufficientData(
            f"need {need} confirmed regenerations, have {record.n_confirmed}")
    return bool(np.all(record.radii[:need] < scale_R(2, N, strict=False)))


# -- asymptotic direction ----------------------------------------------------


@dataclass
class DirectionEstimate:
    v_emp: np.ndarray | None
    v_L_emp: np.ndarray | None
    drift_detected: bool
    mean_displacement: np.ndarray
    displacement_se: float
    n_used: int  # replicas with tau_1, tau_2 confirmed
    n_A_L: int  # of those, replicas where A_L holds
    n_unchecked: int  # replicas without enough confirmed regenerations for A_L
    increments: np.ndarray = field(repr=False, default=None)
    in_A_L: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        out = {k: v for k, v in self.__dict__.items() if k not in ("increments", "in_A_L")}
        for k, v in out.items():
            if isinstance(v, np.ndarray):
                out[k] = v.tolist()
        return out


def _unit_or_none(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else None


def estimate_direction(model, M: int, horizon: int, L: int = 16, seed: int = 0,
                       confirm_horizon: int | None = None, workers: int = 1) -> DirectionEstimate:
    """Empirical v-hat and v-hat_L from regeneration increments.

    Each replica walks ``horizon`` steps in a fresh environment. The
    increment X_{tau_2} - X_{tau_1} is used when both regenerations are
    confirmed; v-hat_L restricts to replicas where A_L holds. Drift is
    detected from the mean endpoint displacement (3 standard errors).
    """
    if M < 1:
        raise BadParameter("M must be >= 1")
    H = horizon // 4 if confirm_horizon is None else int(confirm_horizon)
    region = Free(model.d)
    start = np.zeros(model.d, dtype=np.int64)
    d = model.d

    def job(rng):
        res = run_replicas(model, replica_seeds(seed, "direction", rng), region, start,
                           horizon, record=True)
        inc = np.full((len(rng), d), np.nan)
        a_l = np.zeros(len(rng), dtype=np.int8)  # 1 holds, 0 fails, -1 unchecked
        for r in range(len(rng)):
            pos = _core.positions_from_moves(start, res.moves[r], int(res.steps[r]))
            rec = _record_from_positions(pos, H)
            if len(rec.times) >= 2 and rec.confirmed[:2].all():
                inc[r] = rec.positions[1] - rec.positions[0]
            try:
                a_l[r] = 1 if check_event_A_N(rec, L) else 0
            except InsufficientData:
                a_l[r] = -1
        return inc, a_l, res.finals

    parts = ordered_map(job, chunks(M, _CHUNK), workers)
    inc = np.concatenate([p[0] for p in parts])
    a_l = np.concatenate([p[1] for p in parts])
    ends = np.concatenate([p[2] for p in parts]).astype(float)
    mean_end = ends.mean(axis=0)
    se = math.sqrt(ends.var(axis=0, ddof=1).sum() / M) if M > 1 else float("inf")
    drift = bool(np.linalg.norm(mean_end) > 3 * se)
    ok = ~np.isnan(inc[:, 0])
    use_l = ok & (a_l == 1)
    v = v_l = None
    if drift and ok.any():
        v = _unit_or_none(inc[ok].mean(axis=0))
        if use_l.any():
            v_l = _unit_or_none(inc[use_l].mean(axis=0))
    return DirectionEstimate(v, v_l, drift, mean_end, se, int(ok.sum()), int(use_l.sum()),
                             int(np.sum(a_l == -1)), inc, a_l == 1)
