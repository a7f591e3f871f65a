"""Experiment runner: ``rwre <kind> --config cfg.json [--seed N] [--workers N] [--out DIR]``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration (a JSON
error object is written to standard error).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .environment import build_environment, model_from_dict
from .errors import ConfigError

CSV_SCHEMA_VERSION = 1

KINDS = ("env-dump", "walk", "solve", "t-gamma", "criterion", "criterion-search", "bands",
         "ladder", "census", "tails", "floor", "direction", "fluctuation", "intersections",
         "llt", "exit-kernel")

_TOP_KEYS = {"kind", "model", "params", "seed", "replicas", "workers", "out"}
_NO_MODEL = {"ladder", "llt"}

REQ = object()  # marks a required parameter

# allowed parameter keys per kind, with defaults (REQ: required)
_PARAMS = {
    "env-dump": {"lo": REQ, "hi": REQ},
    "walk": {"region": REQ, "start": None, "step_cap": 10 ** 6, "stream_id": 0},
    "solve": {"region": REQ, "start": None, "method": "gauss_seidel", "tolerance": 1e-12},
    "t-gamma": {"l": None, "b": 1.0, "gamma": 0.5, "L_grid": REQ, "step_cap": 10 ** 7},
    "criterion": {"L": REQ, "Lt": REQ, "a": REQ, "c1": 1.0, "c2": 4.0, "slab": False},
    "criterion-search": {"L_grid": REQ, "a_grid": [0.0, 0.5, 1.0], "eps_grid": [0.5],
                         "Lt_power": 2.0, "c1": 1.0, "c2": 4.0, "slab": False},
    "bands": {"L": REQ, "Lt": REQ, "gamma": 0.5, "betas": REQ, "ks": REQ, "eps": 0.5,
              "slab": False},
    "ladder": {"L": REQ, "ladder": REQ},
    "census": {"L": REQ, "ladder": REQ, "vhat": None, "reference_replicas": 100,
               "site_budget": 10000},
    "tails": {"geometry": REQ, "c": REQ, "beta": REQ, "L": REQ, "l": None, "K": 1.0,
              "delta": 0.1, "axis": 0, "depth": None, "L_grid": None},
    "floor": {"L": REQ, "C_prime": 1.0, "start": None},
    "direction": {"L": 16, "horizon": None},
    "fluctuation": {"L": REQ, "start": None, "k": 3},
    "intersections": {"L": REQ, "starts": REQ, "m_grid": [1, 2, 3]},
    "llt": {"law": REQ, "n_grid": REQ},
    "exit-kernel": {"L_grid": REQ},
}


@dataclass
class ExperimentConfig:
    kind: str
    model: dict | None
    params: dict
    seed: int = 0
    replicas: int = 1
    workers: int = 1
    out: str = "rwre-out"
    raw: dict = field(default_factory=dict, repr=False)

    def canonical(self) -> str:
        """Canonical JSON of everything that determines the data artifacts."""
        return json.dumps({"kind": self.kind, "model": self.model, "params": self.params,
                           "seed": self.seed, "replicas": self.replicas}, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _int(v, name, lo=None):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ConfigError(f"{name} must be an integer")
    if lo is not None and v < lo:
        raise ConfigError(f"{name} must be >= {lo}")
    return int(v)


def parse_config(obj: dict, kind: str, seed=None, workers=None, out=None) -> ExperimentConfig:
    """Validate a config dictionary; raises :class:`ConfigError`."""
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(obj) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    if "kind" in obj and obj["kind"] != kind:
        raise ConfigError(f"config kind {obj['kind']!r} does not match subcommand {kind!r}")
    params = obj.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("params must be an object")
    allowed = _PARAMS[kind]
    unknown = set(params) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown params for {kind}: {sorted(unknown)}")
    full = {}
    for k, default in allowed.items():
        if k in params:
            full[k] = params[k]
        elif default is REQ:
            raise ConfigError(f"missing required param {k!r} for {kind}")
        else:
            full[k] = default
    model = obj.get("model")
    if kind not in _NO_MODEL and model is None:
        raise ConfigError(f"{kind} needs a model")
    cfg_seed = obj.get("seed", (model or {}).get("seed", 0))
    cfg = ExperimentConfig(
        kind, model, full,
        _int(seed if seed is not None else cfg_seed, "seed", 0),
        _int(obj.get("replicas", 1), "replicas", 1),
        _int(workers if workers is not None else obj.get("workers", 1), "workers", 1),
        str(out if out is not None else obj.get("out", "rwre-out")), obj)
    _build(cfg)  # constructs every object, so invalid values fail before any work
    return cfg


# -- object construction (validation) ----------------------------------------


def _model(cfg):
    if cfg.model is None:
        return None
    try:
        model, _ = model_from_dict({k: v for k, v in cfg.model.items() if k != "seed"})
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid model: {exc}") from None
    return model


def _build(cfg) -> dict:
    """Model, regions and parameter objects for a config (ConfigError on failure)."""
    from .geometry import region_from_dict
    from .multiscale import LadderParams

    p = cfg.params
    out = {"model": _model(cfg)}
    try:
        if "region" in p:
            out["region"] = region_from_dict(dict(p["region"]))
        if p.get("start") is not None and cfg.kind not in ("intersections",):
            out["start"] = np.asarray(p["start"], dtype=np.int64)
            if "region" in out and (out["start"].shape != (out["region"].d,)
                                    or not out["region"].contains(out["start"])):
                raise ConfigError(f"start {p['start']} is not inside the region")
        if cfg.kind in ("ladder", "census"):
            out["ladder"] = LadderParams(**p["ladder"])
        if cfg.kind == "tails":
            from .exit_stats import ExitTailQuery

            out["query"] = ExitTailQuery(
                p["geometry"], float(p["c"]), float(p["beta"]), float(p["L"]), cfg.replicas,
                tuple(p["l"]) if p["l"] is not None else None, float(p["K"]),
                float(p["delta"]), int(p["axis"]), p["depth"],
                tuple(p["L_grid"]) if p["L_grid"] else None, cfg.seed)
        if cfg.kind == "llt":
            out["law"] = _law(p["law"])
        if cfg.kind == "env-dump":
            lo, hi = (np.asarray(p[k], dtype=np.int64) for k in ("lo", "hi"))
            if lo.shape != (out["model"].d,) or hi.shape != lo.shape or np.any(hi < lo):
                raise ConfigError("lo/hi must be d-vectors with lo <= hi")
            if np.prod(hi - lo + 1) > 10 ** 7:
                raise ConfigError("env-dump box too large")
        if cfg.kind in ("criterion", "bands"):
            from .criteria import _validate_spec

            if cfg.kind == "criterion":
                _validate_spec(out["model"].d, float(p["L"]), float(p["Lt"]), float(p["a"]),
                               float(p["c2"]))
        if cfg.kind == "solve" and p["method"] not in ("gauss_seidel", "jacobi", "direct"):
            raise ConfigError(f"unknown method {p['method']!r}")
        if cfg.kind == "intersections":
            if len(p["starts"]) != 2:
                raise ConfigError("starts must hold two points")
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid params for {cfg.kind}: {exc}") from None
    return out


def _law(spec):
    from .llt import LatticeLaw

    if isinstance(spec, dict) and "srw" in spec:
        return LatticeLaw.srw(int(spec["srw"]))
    if isinstance(spec, dict) and "atoms" in spec:
        return LatticeLaw.from_dict({tuple(a[:-1]): float(a[-1]) for a in spec["atoms"]})
    raise ConfigError("law must be {'srw': d} or {'atoms': [[x..., p], ...]}")


# -- experiment runners ------------------------------------------------------


def _csv_text(rows: list[dict], columns=None) -> str:
    buf = io.StringIO()
    cols = columns or (list(rows[0]) if rows else [])
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else repr(float(v)) if isinstance(v, (float, np.floating))
                        else v) for k, v in r.items()})
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _run_env_dump(cfg, objs):
    p = cfg.params
    env = build_environment(objs["model"], cfg.seed)
    lo, hi = np.asarray(p["lo"]), np.asarray(p["hi"])
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))
    k = env.kernels(pts)
    d = env.d
    rows = [dict({f"x{i + 1}": int(x[i]) for i in range(d)},
                 **{f"p{j}": float(k[r, j]) for j in range(2 * d)}) for r, x in enumerate(pts)]
    return {"sites": len(rows), "fingerprint": objs["model"].fingerprint}, rows


def _run_walk(cfg, objs):
    from .walk import StopReason, replica_seeds, run_replicas, _LABEL_REASON

    p = cfg.params
    region = objs["region"]
    start = objs.get("start", np.zeros(region.d, dtype=np.int64))
    seeds = replica_seeds(cfg.seed, "walk", range(cfg.replicas))
    res = run_replicas(objs["model"], seeds, region, start, int(p["step_cap"]),
                       stream_id=int(p["stream_id"]))
    rows = []
    counts = {r.value: 0 for r in StopReason}
    for i, s in enumerate(seeds):
        reason = _LABEL_REASON[int(res.labels[i])].value
        counts[reason] += 1
        rows.append(dict({"replica": i, "env_seed": s, "steps": int(res.steps[i]),
                          "stop_reason": reason},
                         **{f"x{j + 1}": int(res.finals[i, j]) for j in range(region.d)}))
    return {"stop_reasons": counts, "mean_steps": float(res.steps.mean())}, rows


def _run_solve(cfg, objs):
    from .solver import solve_exit

    p = cfg.params
    region = objs["region"]
    start = objs.get("start", np.zeros(region.d, dtype=np.int64))
    env = build_environment(objs["model"], cfg.seed)
    sol = solve_exit(env, region, start, tolerance=float(p["tolerance"]), method=p["method"])
    summ = sol.summary()
    summ.pop("iterations")
    summ.pop("residual")
    rows = [dict({f"x{i + 1}": int(c) for i, c in enumerate(pt)}, probability=float(q),
                 right_flag=int(r)) for pt, q, r in zip(sol.exit_points, sol.exit_probs,
                                                        sol.exit_right)]
    return summ, rows


def _run_t_gamma(cfg, objs):
    from .criteria import t_gamma_estimate

    p = cfg.params
    d = objs["model"].d
    l = p["l"] if p["l"] is not None else [1.0] + [0.0] * (d - 1)
    rep = t_gamma_estimate(objs["model"], l, float(p["b"]), float(p["gamma"]), p["L_grid"],
                           cfg.replicas, cfg.seed, cfg.workers, int(p["step_cap"]))
    return rep.to_dict(), rep.rows()


def _criterion_spec(p, d, L, Lt):
    from .criteria import criterion_box, criterion_slab

    return criterion_slab(L, Lt, d) if p["slab"] else criterion_box(L, Lt, d=d)


def _run_criterion(cfg, objs):
    from .criteria import effective_criterion_evaluate

    p = cfg.params
    m = objs["model"]
    spec = _criterion_spec(p, m.d, int(p["L"]), p["Lt"])
    rep = effective_criterion_evaluate(m, spec, float(p["a"]), cfg.replicas, float(p["c1"]),
                                       float(p["c2"]), cfg.seed, cfg.workers)
    return rep.to_dict(), [rep.row()]


def _run_criterion_search(cfg, objs):
    from .criteria import effective_criterion_search

    p = cfg.params
    power = float(p["Lt_power"])
    res = effective_criterion_search(objs["model"], p["L_grid"], p["a_grid"], p["eps_grid"],
                                     lambda L: int(round(L ** power)), cfg.replicas,
                                     float(p["c1"]), float(p["c2"]), cfg.seed, cfg.workers,
                                     bool(p["slab"]))
    return res.to_dict(), res.rows()


def _run_bands(cfg, objs):
    from .criteria import rho_band_decomposition, sample_h_rho

    p = cfg.params
    m = objs["model"]
    spec = _criterion_spec(p, m.d, int(p["L"]), p["Lt"])
    samples = sample_h_rho(m, spec, cfg.replicas, cfg.seed, cfg.workers)
    rep = rho_band_decomposition(samples, float(p["gamma"]), p["betas"], p["ks"],
                                 float(p["eps"]), float(p["L"]))
    return rep.to_dict(), rep.rows()


def _run_ladder(cfg, objs):
    from .multiscale import build_ladder

    lad = build_ladder(int(cfg.params["L"]), objs["ladder"])
    params = objs["ladder"]
    rows = [{"k": k + 1, "L_k": N, "threshold_1": params.thresholds(N)[0] if N >= 16 else None,
             "threshold_2": params.thresholds(N)[1] if N >= 16 else None,
             "threshold_3": params.thresholds(N)[2] if N >= 16 else None}
            for k, N in enumerate(lad.levels)]
    return lad.to_dict(), rows


def _run_census(cfg, objs):
    from .multiscale import annealed_reference, bad_block_census, build_ladder

    p = cfg.params
    params = objs["ladder"]
    lad = build_ladder(int(p["L"]), params)
    model = objs["model"]
    refs = {N: annealed_reference(model, N, params.theta, p["vhat"], int(p["reference_replicas"]),
                                  cfg.seed, int(p["site_budget"]), cfg.workers)
            for N in lad.levels}
    env = build_environment(model, cfg.seed)
    rep = bad_block_census(env, int(p["L"]), lad, params, refs, p["vhat"], cfg.workers)
    return rep.summary(), rep.rows()


def _run_tails(cfg, objs):
    from .exit_stats import atypical_exit_tail

    rep = atypical_exit_tail(objs["model"], objs["query"], cfg.workers)
    return rep.summary(), rep.rows()


def _run_floor(cfg, objs):
    from .exit_stats import exit_point_floor

    p = cfg.params
    rep = exit_point_floor(objs["model"], int(p["L"]), cfg.replicas, float(p["C_prime"]),
                           objs.get("start"), cfg.seed, cfg.workers)
    return rep.summary(), rep.rows()


def _run_direction(cfg, objs):
    from .errors import InsufficientData, NoDrift
    from .exit_stats import direction_gap
    from .walk import estimate_direction

    p = cfg.params
    L = int(p["L"])
    horizon = int(p["horizon"]) if p["horizon"] else max(1000, 16 * L * L)
    est = estimate_direction(objs["model"], cfg.replicas, horizon, L, cfg.seed,
                             workers=cfg.workers)
    summ = est.to_dict()
    try:
        summ["gap"] = direction_gap(objs["model"], L, cfg.replicas, horizon, cfg.seed,
                                    cfg.workers).to_dict()
    except (NoDrift, InsufficientData) as exc:
        summ["gap"] = {"unavailable": type(exc).__name__, "reason": str(exc)}
    inc = est.increments
    rows = [dict({f"dx{j + 1}": (None if np.isnan(v[j]) else float(v[j]))
                  for j in range(inc.shape[1])}, replica=i, in_A_L=int(a))
            for i, (v, a) in enumerate(zip(inc, est.in_A_L))]
    return summ, rows


def _run_fluctuation(cfg, objs):
    from .exit_stats import transversal_fluctuation_tail

    p = cfg.params
    rep = transversal_fluctuation_tail(objs["model"], int(p["L"]), cfg.replicas,
                                       objs.get("start"), cfg.seed, cfg.workers, k=int(p["k"]))
    return rep.to_dict(), [rep.to_dict()]


def _run_intersections(cfg, objs):
    from .exit_stats import intersection_census

    p = cfg.params
    rep = intersection_census(objs["model"], int(p["L"]), cfg.replicas, p["starts"], cfg.seed,
                              cfg.workers, tuple(p["m_grid"]))
    return rep.summary(), rep.rows()


def _run_llt(cfg, objs):
    from .llt import llt_discrepancy_report

    rep = llt_discrepancy_report(objs["law"], cfg.params["n_grid"])
    return rep.to_dict(), rep.rows()


def _run_exit_kernel(cfg, objs):
    from .llt import exit_kernel_smoothness

    rep = exit_kernel_smoothness(objs["model"], cfg.params["L_grid"], cfg.replicas, cfg.seed,
                                 cfg.workers)
    return rep.to_dict(), rep.rows()


_RUNNERS = {
    "env-dump": _run_env_dump, "walk": _run_walk, "solve": _run_solve,
    "t-gamma": _run_t_gamma, "criterion": _run_criterion,
    "criterion-search": _run_criterion_search, "bands": _run_bands, "ladder": _run_ladder,
    "census": _run_census, "tails": _run_tails, "floor": _run_floor,
    "direction": _run_direction, "fluctuation": _run_fluctuation,
    "intersections": _run_intersections, "llt": _run_llt, "exit-kernel": _run_exit_kernel,
}


# -- artifacts ---------------------------------------------------------------


def _atomic_write(path: str, text: str):
    folder = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _versions() -> dict:
    import numba
    import scipy

    from . import __version__

    return {"rwre": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run a validated config and write its artifacts; returns the manifest."""
    t0 = time.perf_counter()
    objs = _build(cfg)
    summary, rows = _RUNNERS[cfg.kind](cfg, objs)
    os.makedirs(cfg.out, exist_ok=True)
    base = cfg.kind.replace("-", "_")
    files = {f"{base}.json": json.dumps(_jsonable(summary), sort_keys=True, indent=1) + "\n",
             f"{base}.csv": _csv_text(rows)}
    digests = {}
    for name, text in files.items():
        _atomic_write(os.path.join(cfg.out, name), text)
        digests[name] = hashlib.sha256(text.encode()).hexdigest()
    manifest = {"kind": cfg.kind, "config_hash": cfg.hash(), "config": json.loads(cfg.canonical()),
                "seed": cfg.seed, "workers": cfg.workers, "versions": _versions(),
                "csv_schema_version": CSV_SCHEMA_VERSION,
                "files": [{"name": n, "sha256": digests[n]} for n in sorted(files)],
                "wall_time_s": time.perf_counter() - t0}
    _atomic_write(os.path.join(cfg.out, "manifest.json"),
                  json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def _error(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rwre", description="Random walk in random environment experiments")
    sub = ap.add_subparsers(dest="kind", required=True)
    for k in KINDS:
        sp = sub.add_parser(k, help=f"run a {k} experiment")
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        sp.add_argument("--workers", type=int, default=None, help="worker threads")
        sp.add_argument("--out", default=None, help="output directory")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return _error(2, "UsageError", "invalid command line") if exc.code else 0
    try:
        with open(args.config) as fh:
            obj = json.load(fh)
        cfg = parse_config(obj, args.kind, args.seed, args.workers, args.out)
    except (OSError, json.JSONDecodeError) as exc:
        return _error(2, "ConfigError", f"cannot read config: {exc}")
    except ConfigError as exc:
        return _error(2, "ConfigError", str(exc))
    except ValueError as exc:
        return _error(2, type(exc).__name__, str(exc))
    try:
        run_experiment(cfg)
    except Exception as exc:  # runtime failure
        return _error(1, type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
