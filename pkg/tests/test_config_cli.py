import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from srbridge import config as config_mod
from srbridge.cli import main
from srbridge.errors import ConfigError

SMALL = {
    "grid": {"lower": [-3.0, -3.0, -2.4], "upper": [3.0, 3.0, 2.4], "dims": [10, 10, 12]},
    "ring": {"R0": 1.2, "sR": 0.35, "sigma_z": 0.5},
    "epsilon_schedule": [1.0],
    "bridge": {"n_times": 5},
    "quadrature": {"n_z": 64},
    "sim": {"n_particles": 2000, "n_steps": 50, "epsilon": 1.0, "record_paths": 5,
            "max_exit_fraction": 0.5},
    "diagnose": {"varadhan_epsilons": [0.5, 0.1], "oracle_n_support": 50,
                 "probes": [[1.5, 0.0, 0.0]]},
}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def small_cfg(tmp_path):
    return _write(tmp_path / "cfg.json", SMALL)


def _run(*argv):
    return main([str(a) for a in argv])


# -- configuration -----------------------------------------------------------

def test_defaults_validate():
    cfg = config_mod.resolve()
    assert cfg["grid"]["dims"] == [24, 24, 24]
    assert cfg["epsilon_schedule"] == [1.0, 0.5, 0.1, 0.01]
    assert cfg["sinkhorn"]["tol"] == 1e-8


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="colour"):
        config_mod.resolve({"colour": 3})
    with pytest.raises(ConfigError, match="grid"):
        config_mod.resolve({"grid": {"spacing": 1}})


def test_type_error_names_key():
    with pytest.raises(ConfigError, match="sinkhorn/tol"):
        config_mod.resolve({"sinkhorn": {"tol": "small"}})
    with pytest.raises(ConfigError, match="grid/upper"):
        config_mod.resolve({"grid": {"lower": [0, 0, 0], "upper": [1, -1, 1]}})


def test_overrides():
    cfg = config_mod.resolve({"seed": 4}, out="x", seed=9)
    assert cfg["seed"] == 9 and cfg["out"] == "x"


def test_schema_copies_in_sync():
    here = os.path.dirname(__file__)
    with open(os.path.join(here, "..", "docs", "config.schema.json")) as fh:
        assert json.load(fh) == config_mod.load_schema()


# -- exit codes ---------------------------------------------------------------

def test_exit_config_unknown_key(tmp_path, capsys):
    path = _write(tmp_path / "bad.json", {"gird": {}})
    assert _run("solve", "--config", path, "--out", tmp_path / "o") == 1
    assert "gird" in capsys.readouterr().err


def test_exit_config_missing_and_malformed(tmp_path):
    assert _run("distance", "--config", tmp_path / "nope.json") == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert _run("distance", "--config", bad) == 1
    assert _run("distance", "--threads", "-1", "--out", tmp_path / "o") == 1


def test_exit_quadrature(tmp_path):
    path = _write(tmp_path / "q.json", {"quadrature": {"max_panels": 1},
                                        "kernel": {"points": [[0.01, 0.0, 2.0]],
                                                   "epsilon": 0.1}})
    assert _run("kernel", "--config", path, "--out", tmp_path / "o") == 2


def test_exit_convergence_keeps_partial(tmp_path):
    cfg = dict(SMALL, sinkhorn={"max_iters": 2})
    path = _write(tmp_path / "c.json", cfg)
    out = tmp_path / "o"
    assert _run("solve", "--config", path, "--out", out) == 3
    report = json.loads((out / "report.json").read_text())
    assert "failure" in report
    assert (out / "resolved_config.json").exists()


def test_exit_missing_artifact(tmp_path, small_cfg):
    assert _run("simulate", "--config", small_cfg, "--out", tmp_path / "o") == 4
    assert _run("diagnose", "--config", small_cfg, "--out", tmp_path / "o") == 4


# -- verbs ----------------------------------------------------------------------

def test_distance_verb(tmp_path, capsys):
    out = tmp_path / "d"
    assert _run("distance", "--out", out, "--from", 0, 0, 0, "--to", 0, 3, 0) == 0
    assert float(capsys.readouterr().out.strip()) == pytest.approx(9.0, rel=1e-12)
    res = json.loads((out / "distance.json").read_text())
    assert res["d2"] == pytest.approx(9.0, rel=1e-12)
    snap = json.loads((out / "resolved_config.json").read_text())
    assert snap["out"] == str(out)


def test_kernel_verb_tabulates(tmp_path, capsys):
    path = _write(tmp_path / "k.json", {"kernel": {"tabulate": True, "n_rho": 32, "n_z": 32,
                                                   "rho_max": 4.0, "z_max": 3.0}})
    out = tmp_path / "k"
    assert _run("kernel", "--config", path, "--out", out, "--point", 0, 0, 0) == 0
    assert capsys.readouterr().out.startswith("p(0.0, 0.0, 0.0) = ")
    meta = json.loads((out / "kernel" / "table" / "meta.json").read_text())
    assert meta
    vals = np.fromfile(out / "kernel" / "table" / "values.f64le", dtype="<f8")
    assert vals.size == 32 * 32 and np.all(vals > 0)


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    path = _write(base / "cfg.json", SMALL)
    outs = []
    for k in range(2):
        out = base / f"run{k}"
        assert _run("solve", "--config", path, "--out", out, "--seed", 7) == 0
        assert _run("simulate", "--config", path, "--out", out, "--seed", 7) == 0
        outs.append(out)
    return path, outs


def test_solve_layout(solved):
    _, (out, _) = solved
    report = json.loads((out / "report.json").read_text())
    assert "warm_start" not in report
    assert [lv["epsilon"] for lv in report["levels"]] == [1.0]
    assert (out / "potentials" / "eps_1" / "log_phi_f" / "data.f64le").exists()
    summary = json.loads((out / "bridges" / "eps_1" / "summary.json").read_text())
    assert len(summary["mass_drift"]) == 5


def test_simulate_outputs(solved):
    _, (out, _) = solved
    with open(out / "simulate" / "trajectories.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "particle", "x", "y", "z"]
    assert len(rows) == 1 + 5 * 51
    metrics = json.loads((out / "simulate" / "metrics.json").read_text())
    assert metrics["max_horizontal_residual"] == 0.0
    assert (out / "simulate" / "terminal_histogram" / "data.f64le").exists()


def test_reruns_byte_identical(solved):
    _, (a, b) = solved
    for rel in ("report.json", "simulate/metrics.json", "simulate/trajectories.csv",
                "bridges/eps_1/summary.json", "potentials/eps_1/log_phi_f/data.f64le"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_diagnose_adds_tables(solved):
    path, (out, _) = solved
    assert _run("diagnose", "--config", path, "--out", out) == 0
    diag = json.loads((out / "report.json").read_text())["diagnostics"]
    assert len(diag["varadhan"]["rows"]) == 1
    assert diag["oracle"]["value"] > 0
    assert diag["oracle"]["costs"][0]["epsilon"] == 1.0


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "srbridge", "distance", "--out",
                           str(tmp_path / "m"), "--threads", "1"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert float(proc.stdout) == pytest.approx(1.0)
