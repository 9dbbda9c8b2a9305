"""CLI: config validation, determinism, exit codes."""

import json

import pytest

from aclab.cli import run


def write_config(tmp_path, name, payload):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(payload))
    return path


def test_malformed_config_exits_2_without_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path, "bad", {"schema_version": 1, "bogus": True})
    out = tmp_path / "out"
    code = run(["bond-density", "--config", str(cfg), "--out", str(out)])
    assert code == 2
    assert not out.exists()
    assert "unknown config keys" in capsys.readouterr().err


def test_wrong_schema_version_rejected(tmp_path):
    cfg = write_config(tmp_path, "old", {"schema_version": 99})
    code = run(["bond-density", "--config", str(cfg), "--out",
                str(tmp_path / "o")])
    assert code == 2


def test_bond_density_run_and_determinism(tmp_path):
    cfg = write_config(tmp_path, "bd", {"schema_version": 1, "trials": 10})
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert run(["bond-density", "--config", str(cfg), "--out", str(out1),
                "--seed", "7", "--quiet"]) == 0
    assert run(["bond-density", "--config", str(cfg), "--out", str(out2),
                "--seed", "7", "--quiet"]) == 0
    assert (out1 / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()
    assert (out1 / "summary.json").read_bytes() == \
        (out2 / "summary.json").read_bytes()
    summary = json.loads((out1 / "summary.json").read_text())
    assert summary["pass"] is True


def test_patch_test_run_2d(tmp_path):
    cfg = write_config(tmp_path, "pt", {
        "schema_version": 1, "dimension": 2, "N": 8,
        "potential": {"name": "harmonic_nn_diag"},
        "coupling": {"name": "bond_split"},
        "region": {"core_halfwidth": 2, "interface_layers": 2},
    })
    out = tmp_path / "out"
    assert run(["patch-test", "--config", str(cfg), "--out", str(out),
                "--quiet"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["consistent"] is True


def test_consistency_1d_run(tmp_path):
    cfg = write_config(tmp_path, "c1", {
        "schema_version": 1, "N_values": [32], "p_values": [2],
    })
    out = tmp_path / "out"
    assert run(["consistency-1d", "--config", str(cfg), "--out", str(out),
                "--quiet"]) == 0
    rows = (out / "report.csv").read_text().strip().splitlines()
    assert len(rows) == 2  # header plus one row
    assert "qnl_lhs" in rows[0]


def test_counterexample_run(tmp_path):
    cfg = write_config(tmp_path, "ce", {
        "schema_version": 1, "N": 8, "kind": "scaling",
        "beta_values": [1.0],
    })
    out = tmp_path / "out"
    assert run(["counterexample", "--config", str(cfg), "--out", str(out),
                "--quiet"]) == 0


def test_stress_run_writes_fields(tmp_path):
    cfg = write_config(tmp_path, "st", {
        "schema_version": 1, "N": 8,
        "potential": {"name": "harmonic_nn_diag"},
        "coupling": {"name": "bond_split"},
        "region": {"core_halfwidth": 2, "interface_layers": 2},
    })
    out = tmp_path / "out"
    assert run(["stress", "--config", str(cfg), "--out", str(out),
                "--quiet"]) == 0
    assert (out / "fields" / "sigma_atomistic.csv").exists()
    assert (out / "fields" / "sigma_coupled.csv").exists()
    assert (out / "fields" / "mesh.csv").exists()
