import hashlib
import json
import subprocess
import sys

import pytest

from rwre import cli

BIASED = {"d": 2, "kappa": 0.2, "variant": {"type": "deterministic", "kernel": [0.4, 0.2, 0.2, 0.2]}}
STRONG = {"d": 2, "kappa": 0.01, "variant": {"type": "deterministic", "kernel": [0.97, 0.01, 0.01, 0.01]}}
DIRICHLET = {"d": 2, "kappa": 0.05, "variant": {"type": "dirichlet", "alpha": [2, 1, 1, 1]}}
SRW = {"d": 2, "kappa": 0.25, "variant": {"type": "deterministic", "kernel": [0.25] * 4}}
SLAB = {"type": "slab", "l": [1, 0], "left_depth": 8, "right_level": 8, "transversal": "periodic",
        "width": 4}
LADDER = {"alpha": 0.5, "beta": 0.9, "delta": 0.05, "psi": 0.105, "chi": 0.025, "theta": 0.025,
          "L1": 16, "m": 2}

CONFIGS = {
    "env-dump": {"model": DIRICHLET, "params": {"lo": [-3, -3], "hi": [3, 3]}},
    "walk": {"model": DIRICHLET, "params": {"region": SLAB}, "replicas": 300},
    "solve": {"model": BIASED, "params": {"region": SLAB, "start": [0, 0]}, "seed": 1},
    "t-gamma": {"model": BIASED, "params": {"L_grid": [4, 8]}, "replicas": 3000},
    "criterion": {"model": DIRICHLET, "params": {"L": 8, "Lt": 16, "a": 0.5}, "replicas": 4},
    "criterion-search": {"model": DIRICHLET, "params": {"L_grid": [6, 8], "Lt_power": 1.5},
                         "replicas": 3},
    "bands": {"model": DIRICHLET, "params": {"L": 8, "Lt": 16, "betas": [0.5, 1.0],
                                             "ks": [0.5, 0.25]}, "replicas": 4},
    "ladder": {"params": {"L": 10000, "ladder": dict(LADDER, L1=4, m=3)}},
    "census": {"model": BIASED, "params": {"L": 100, "ladder": LADDER, "reference_replicas": 1}},
    "tails": {"model": DIRICHLET, "params": {"geometry": "box", "c": 0.5, "beta": 0.5, "L": 6},
              "replicas": 20},
    "floor": {"model": DIRICHLET, "params": {"L": 6}, "replicas": 3},
    "direction": {"model": STRONG, "params": {"L": 8}, "replicas": 200},
    "fluctuation": {"model": BIASED, "params": {"L": 8}, "replicas": 500},
    "intersections": {"model": BIASED, "params": {"L": 8, "starts": [[0, 0], [0, 2]]},
                      "replicas": 200},
    "llt": {"params": {"law": {"srw": 1}, "n_grid": [4, 8, 16]}},
    "exit-kernel": {"model": DIRICHLET, "params": {"L_grid": [4, 6]}, "replicas": 3},
}


def run(tmp_path, kind, cfg, *extra):
    path = tmp_path / f"{kind}.json"
    path.write_text(json.dumps(cfg))
    return cli.main([kind, "--config", str(path), *extra])


def digests(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(folder.iterdir()) if p.suffix in (".csv", ".json") and p.name != "manifest.json"}


def test_every_kind_has_a_config():
    assert set(CONFIGS) == set(cli.KINDS)


@pytest.mark.parametrize("kind", sorted(CONFIGS))
def test_worker_count_invariance(tmp_path, kind):
    a, b = tmp_path / "w1", tmp_path / "w8"
    assert run(tmp_path, kind, CONFIGS[kind], "--workers", "1", "--out", str(a)) == 0
    assert run(tmp_path, kind, CONFIGS[kind], "--workers", "8", "--out", str(b)) == 0
    da, db = digests(a), digests(b)
    assert da == db and any(n.endswith(".csv") for n in da)
    man = json.loads((a / "manifest.json").read_text())
    assert {f["name"] for f in man["files"]} == set(da)
    assert all(f["sha256"] == da[f["name"]] for f in man["files"])
    assert man["csv_schema_version"] == cli.CSV_SCHEMA_VERSION
    assert man["config_hash"] == json.loads((b / "manifest.json").read_text())["config_hash"]


def test_solve_matches_ruin(tmp_path):
    assert run(tmp_path, "solve", CONFIGS["solve"], "--out", str(tmp_path / "o")) == 0
    summ = json.loads((tmp_path / "o" / "solve.json").read_text())
    assert abs(summ["h_start"] - (1 - 0.5 ** 8) / (1 - 0.5 ** 16)) <= 1e-10


def test_rerun_identical(tmp_path):
    for out in ("r1", "r2"):
        assert run(tmp_path, "walk", CONFIGS["walk"], "--out", str(tmp_path / out)) == 0
    assert digests(tmp_path / "r1") == digests(tmp_path / "r2")


def test_seed_override_changes_output(tmp_path):
    assert run(tmp_path, "walk", CONFIGS["walk"], "--out", str(tmp_path / "a")) == 0
    assert run(tmp_path, "walk", CONFIGS["walk"], "--seed", "5", "--out", str(tmp_path / "b")) == 0
    assert digests(tmp_path / "a") != digests(tmp_path / "b")


@pytest.mark.parametrize("cfg", [
    dict(CONFIGS["solve"], foo=1),
    {"model": BIASED, "params": {"region": SLAB, "bogus": 1}},
    {"model": BIASED, "params": {}},
    {"params": {"region": SLAB}},
    {"model": BIASED, "params": {"region": SLAB, "start": [20, 0]}},
    {"model": BIASED, "params": {"region": SLAB, "method": "sor"}},
    {"model": dict(BIASED, kappa=0.5), "params": {"region": SLAB}},
    {"model": BIASED, "params": {"region": dict(SLAB, transversal="twisted")}},
    {"model": BIASED, "params": {"region": SLAB}, "seed": -1},
])
def test_config_errors_exit_2(tmp_path, capsys, cfg):
    assert run(tmp_path, "solve", cfg, "--out", str(tmp_path / "o")) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and err["error"]
    assert not (tmp_path / "o").exists()


def test_unreadable_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["solve", "--config", str(bad)]) == 2
    assert cli.main(["solve", "--config", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["nonsense", "--config", str(bad)]) == 2


def test_runtime_failure_exit_1(tmp_path, capsys, monkeypatch):
    def boom(cfg, objs):
        raise RuntimeError("solver exploded")

    monkeypatch.setitem(cli._RUNNERS, "llt", boom)
    assert run(tmp_path, "llt", CONFIGS["llt"], "--out", str(tmp_path / "o")) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err == {"error": "RuntimeError", "message": "solver exploded", "exit_code": 1}


def test_module_entry_point(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(dict(CONFIGS["solve"], foo=1)))
    proc = subprocess.run([sys.executable, "-m", "rwre.cli", "solve", "--config", str(path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"] == "ConfigError"
