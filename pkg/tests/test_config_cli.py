from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from ldtn import collision, oracle
from ldtn.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION, main
from ldtn.collision import ModelParams
from ldtn.config import ConfigError, RunConfig, load_config, parse_config

SMALL = """
# two-site scan
model.L = 2
model.v = 2.0
solver.d_max = 16
solver.d_max_ref = none
solver.cutoff = 0
solver.tol = 1e-12
grids.s = -0.05, 0.0, 0.05
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    rows = list(csv.DictReader(lines[1:]))
    return lines[0], rows


def dense_theta(p, s):
    lam, _, _ = oracle.dense_dominant_eig(oracle.dense_tilted_superoperator(p, s, trotterized=True))
    return math.log(lam) / p.L


# ------------------------------------------------------------------- config


def test_defaults_are_valid():
    cfg = load_config(None)
    assert cfg["model.L"] == 2 and cfg["solver.d_max"] == 96
    assert cfg.L_list == (2,) and cfg.v_list == (2.0,)


def test_parse_lists_comments_and_optional_values():
    cfg = parse_config(SMALL + "grids.v_over_omega = 1, 2.5\ngrids.L = 2,3\n")
    assert cfg["grids.s"] == (-0.05, 0.0, 0.05)
    assert cfg["solver.d_max_ref"] is None
    assert cfg.L_list == (2, 3) and cfg.v_list == (1.0, 2.5)
    assert cfg.solver().d_max_ref is None and cfg.solver().tol == 1e-12


@pytest.mark.parametrize(
    "text",
    [
        "model.Lx = 3",
        "model.L 3",
        "model.L = three",
        "model.gamma = -1",
        "model.L = 0",
        "solver.d_max = 8\nsolver.d_max_ref = 8",
        "solver.tol = 0",
        "sampling.seed = -1",
        "solver.hellmann_feynman = maybe",
        "model.omega = 0\ngrids.v_over_omega = 1",
    ],
)
def test_bad_configs_raise(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_hash_ignores_output_and_tracks_settings():
    a = parse_config(SMALL)
    b = parse_config(SMALL + "output.directory = elsewhere\n")
    c = parse_config(SMALL + "sampling.seed = 4\n")
    assert a.hash() == b.hash() != c.hash()
    assert len(a.hash()) == 16


def test_overrides():
    cfg = RunConfig().with_overrides({"sampling.seed": 9})
    assert cfg["sampling.seed"] == 9
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({"nope": 1})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


# ---------------------------------------------------------------------- cli


def test_cli_config_errors_exit_one(tmp_path, capsys):
    bad = write_cfg(tmp_path, "model.L = 0\n")
    assert main(["scgf-scan", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert main(["sample", "--out", str(tmp_path / "o"), "--jobs", "0"]) == EXIT_CONFIG
    assert main(["sample", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG


def test_cli_scan_matches_dense_and_writes_hash(tmp_path):
    out = tmp_path / "scan"
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["scgf-scan", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    header, rows = read_csv(out / "scgf_L2_V2.csv")
    assert parse_config(SMALL).hash() in header
    p = ModelParams(L=2, v=2.0)
    for row in rows:
        assert abs(float(row["theta"]) - dense_theta(p, float(row["s"]))) < 1e-8
        assert row["activity"] != ""
    _, rate = read_csv(out / "rate_L2_V2.csv")
    assert rate and all(float(r["phi"]) >= -1e-12 for r in rate)
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["status"] == "ok" and "scgf_L2_V2.csv" in manifest["files"]


def test_cli_scan_gamma_zero_gives_zero_theta(tmp_path):
    out = tmp_path / "g0"
    cfg = write_cfg(tmp_path, SMALL + "model.gamma = 0\n")
    assert main(["scgf-scan", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    _, rows = read_csv(out / "scgf_L2_V2.csv")
    assert all(abs(float(r["theta"])) < 1e-12 for r in rows)


def test_cli_scan_reports_numeric_failure(tmp_path, monkeypatch):
    import ldtn.large_deviations as ld
    from ldtn.errors import NumericError

    real = ld.power_iterate_scgf

    def flaky(p, s, settings, rho=None):
        if s > 0:
            raise NumericError("forced")
        return real(p, s, settings, rho)

    monkeypatch.setattr(ld, "power_iterate_scgf", flaky)
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["scgf-scan", "--config", str(cfg), "--out", str(tmp_path / "f")]) == EXIT_NUMERIC


def test_cli_outputs_are_reproducible(tmp_path):
    cfg = write_cfg(tmp_path, SMALL + "sampling.T = 3\nsampling.n_samples = 20\n")
    for cmd in ("scgf-scan", "sample"):
        a, b = tmp_path / f"{cmd}_a", tmp_path / f"{cmd}_b"
        assert main([cmd, "--config", str(cfg), "--out", str(a), "--seed", "17"]) == EXIT_OK
        assert main([cmd, "--config", str(cfg), "--out", str(b), "--seed", "17"]) == EXIT_OK
        files = sorted(
            f.relative_to(a) for f in a.rglob("*") if f.is_file() and f.name != "run_manifest.json"
        )
        assert files
        for rel in files:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_cli_parallel_sampling_matches_serial(tmp_path):
    cfg = write_cfg(tmp_path, SMALL + "sampling.T = 3\nsampling.n_samples = 12\n")
    a, b = tmp_path / "serial", tmp_path / "parallel"
    assert main(["sample", "--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert main(["sample", "--config", str(cfg), "--out", str(b), "--jobs", "3"]) == EXIT_OK
    assert (a / "sample_summary.json").read_bytes() == (b / "sample_summary.json").read_bytes()


def test_cli_sample_gamma_zero_has_empty_rasters(tmp_path):
    cfg = write_cfg(
        tmp_path, SMALL + "model.gamma = 0\nsampling.T = 4\nsampling.n_samples = 5\n"
    )
    out = tmp_path / "s"
    assert main(["sample", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "sample_summary.json").read_text())
    assert summary["mean_activity"] == 0.0
    assert summary["stationary_activity"] == pytest.approx(0.0, abs=1e-12)
    for f in (out / "trajectories").glob("traj_*.txt"):
        lines = f.read_text().splitlines()
        assert all(set(ln.split()) == {"0"} for ln in lines[1:5])


def test_cli_correlator_reuses_ensemble(tmp_path):
    cfg = write_cfg(tmp_path, SMALL + "sampling.T = 3\nsampling.n_samples = 8\n")
    out = tmp_path / "c"
    assert main(["correlator", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    first = json.loads((out / "sample_summary.json").read_text())
    cfg2 = write_cfg(tmp_path, SMALL + "sampling.T = 3\nsampling.max_len = 2\n", "two.cfg")
    assert main(["correlator", "--config", str(cfg2), "--out", str(out)]) == EXIT_OK
    second = json.loads((out / "sample_summary.json").read_text())
    assert second["n_samples"] == 8
    assert second["string_correlator"][0]["C"] == first["string_correlator"][0]["C"][:2]


def test_cli_synthetic_phase_diagram(tmp_path):
    s = ", ".join(repr(float(x)) for x in np.round(np.linspace(0.0, 0.05, 51), 6))
    text = (
        f"model.L = 10\ngrids.L = 10, 20, 40\ngrids.v_over_omega = 2, 3\ngrids.s = {s}\n"
        "synthetic.enabled = true\nsynthetic.a0 = 0.5\nsynthetic.c = 0.01\nsynthetic.d = -0.05\n"
    )
    out = tmp_path / "pd"
    assert main(["phase-diagram", "--config", str(write_cfg(tmp_path, text)), "--out", str(out)]) == 0
    payload = json.loads((out / "s_star.json").read_text())
    assert payload["failures"] == []
    for est in payload["estimates"]:
        per_L = {row["L"]: row["s_cross"] for row in est["per_L"]}
        for L in (10, 20, 40):
            assert per_L[L] == pytest.approx(0.01 / (0.5 - 0.05 / L), abs=1e-10)
        assert est["s_star"] == pytest.approx(0.02, abs=1e-4)
        assert est["uncertainty"] is not None
    _, grid = read_csv(out / "activity_grid.csv")
    assert len(grid) == 3 * 2 * 51


def test_cli_validate_passes_and_catches_broken_kernel(tmp_path, monkeypatch, capsys):
    cfg = write_cfg(tmp_path, "validate.L = 2\nvalidate.s = -0.05, 0.0, 0.1\n")
    out = tmp_path / "v"
    assert main(["validate", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "all checks passed" in text and "FAIL" not in text
    report = json.loads((out / "validate_report.json").read_text())
    assert report["passed"] and all(c["passed"] for c in report["checks"])

    orig = collision._split_joint
    # swap the bra legs of system and ancilla: a plausible indexing bug
    monkeypatch.setattr(collision, "_split_joint", lambda t: orig(t).transpose(0, 1, 3, 2, 4, 5))
    assert main(["validate", "--config", str(cfg), "--out", str(tmp_path / "bad")]) == EXIT_VALIDATION
    assert "FAIL" in capsys.readouterr().out
