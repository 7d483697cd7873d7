"""Config parsing, artifact layout, exit codes, and rerun determinism."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from splitavf import hamiltonian
from splitavf.cli import (
    ConfigError,
    build_model,
    main,
    parse_config,
    read_density_binary,
)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"

BASE = """\
[model]
potential = quartic1d
v = 1.0
x0 = 1.0, 1.0

[experiment]
kind = converge-strong
T = 1.0
h_list = 0.0625, 0.03125
h_ref = 0.00390625
samples = 20
seed = 11

[output]
directory = out
"""


def _errs(text):
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    return e.value.errors


def _has(errors, line, fragment):
    return any(ln == line and fragment in msg for ln, msg in errors)


# ---------------------------------------------------------------------------
# Parsing and validation


def test_parse_shipped_configs():
    cfg1 = parse_config((CONFIG_DIR / "example1.cfg").read_text())
    assert cfg1.model.potential == "quartic1d"
    assert cfg1.experiment.kind == "converge-strong"
    assert cfg1.experiment.h_list == tuple(2.0**-k for k in range(5, 10))
    assert cfg1.experiment.h_ref == 2.0**-12
    assert cfg1.experiment.samples == 2000
    m1 = build_model(cfg1)
    assert hamiltonian(m1, m1.x0) == 2.5

    cfg2 = parse_config((CONFIG_DIR / "example2.cfg").read_text())
    assert cfg2.model.m == 2
    assert cfg2.experiment.samples == 1000
    m2 = build_model(cfg2)
    assert m2.potential.hessian_lower_bound == 2.0


def test_parse_defaults_and_dedup():
    cfg = parse_config(
        "[model]\npotential = quartic1d\nv = 1.0\nx0 = 0.5, 0.5\n"
        "[experiment]\nh_list = 0.25, 0.5, 0.25\n"
    )
    assert cfg.model.m == 1 and cfg.model.d == 1
    assert cfg.model.sigma == (1.0,)
    assert cfg.experiment.kind == "simulate"
    assert cfg.experiment.h_list == (0.5, 0.25)
    assert cfg.integrator.scheme == "avf_split"
    assert cfg.output.formats == ("csv", "json")


def test_parse_custom_poly_terms():
    cfg = parse_config(
        "[model]\npotential = custom_poly\ncoeffs = 1.0: 4, -1.0: 2\n"
        "v = 1.0\nx0 = 0.0, 0.0\n"
    )
    assert cfg.model.coeffs == ((1.0, (4,)), (-1.0, (2,)))
    model = build_model(cfg)
    assert model.potential.hessian_lower_bound == pytest.approx(2.0)
    assert model.potential.evaluate(np.array([2.0])) == pytest.approx(12.0)


def test_error_line_numbers():
    errs = _errs(
        "[model]\n"            # 1
        "potential = quartic1d\n"  # 2
        "v = 1.0\n"            # 3
        "x0 = 1.0, 1.0\n"      # 4
        "bogus = 3\n"          # 5
        "[mystery]\n"          # 6
        "a = 1\n"              # 7 (swallowed with its section)
        "[model\n"             # 8
        "v = 2.0\n"            # 9 (outside any section after bad header)
    )
    assert _has(errs, 5, "unknown key 'bogus'")
    assert _has(errs, 6, "unknown section [mystery]")
    assert _has(errs, 8, "malformed section header")
    assert _has(errs, 9, "outside of any section")


def test_error_duplicate_and_bad_value():
    errs = _errs(
        "[model]\npotential = quartic1d\nv = 1.0\nv = 2.0\nx0 = 1.0, 1.0\n"
    )
    assert _has(errs, 4, "duplicate key 'v'")
    errs = _errs("[model]\npotential = quartic1d\nv = abc\nx0 = 1.0, 1.0\n")
    assert _has(errs, 3, "bad value for model.v")
    errs = _errs("[model]\npotential = quartic1d\nv = inf\nx0 = 1.0, 1.0\n")
    assert _has(errs, 3, "bad value for model.v")


def test_error_missing_section_and_keys():
    errs = _errs("x = 1\n")
    assert _has(errs, 0, "missing [model] section")
    assert _has(errs, 1, "outside of any section")
    errs = _errs("[model]\npotential = quartic1d\nx0 = 1.0, 1.0\n")
    assert _has(errs, 0, "missing required key model.v")


def test_error_shape_mismatches():
    errs = _errs(
        "[model]\npotential = coupled2d\nm = 2\nv = 1.0\n"
        "sigma = 1.0, 0.0, 0.0\nx0 = 1.0, 1.0, 1.0, 1.0\n"
    )
    assert _has(errs, 5, "sigma needs m*d = 4 entries")
    errs = _errs("[model]\npotential = quartic1d\nv = 1.0\nx0 = 1.0\n")
    assert _has(errs, 4, "x0 needs 2m = 2 entries")
    errs = _errs("[model]\npotential = custom_poly\nv = 1.0\nx0 = 1.0, 1.0\n")
    assert _has(errs, 2, "custom_poly requires model.coeffs")


def test_error_ladder_constraints():
    errs = _errs(BASE.replace("h_list = 0.0625, 0.03125", "h_list = 0.3"))
    assert any("does not divide" in msg for _, msg in errs)
    # 3*2^-7 divides T = 0.75 but is no power-of-two multiple of h_ref
    text = BASE.replace("T = 1.0", "T = 0.75").replace(
        "h_list = 0.0625, 0.03125", "h_list = 0.0234375"
    )
    errs = _errs(text)
    assert any("power-of-two multiple" in msg for _, msg in errs)


def test_error_scalar_fields():
    assert any("unknown scheme" in m for _, m in _errs(
        BASE + "[integrator]\nscheme = magic\n"))
    assert any("unknown kind" in m for _, m in _errs(
        BASE.replace("kind = converge-strong", "kind = dance")))
    assert any("T must be positive" in m for _, m in _errs(
        BASE.replace("T = 1.0", "T = -1.0")))
    assert any("samples must be" in m for _, m in _errs(
        BASE.replace("samples = 20", "samples = 0")))
    assert any("seed must be" in m for _, m in _errs(
        BASE.replace("seed = 11", "seed = -1")))
    assert any("unknown output format" in m for _, m in _errs(
        BASE + "formats = csv, xml\n"))
    assert any("bandwidth_rule" in m for _, m in _errs(
        BASE.replace("seed = 11", "bandwidth_rule = 0.0")))


# ---------------------------------------------------------------------------
# End-to-end runs (in-process main)


def _write_cfg(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return str(p)


def _read_summary(out):
    with open(Path(out) / "summary.json") as fh:
        return json.load(fh)


def test_simulate_end_to_end(tmp_path):
    cfg = _write_cfg(tmp_path, BASE)
    out = str(tmp_path / "sim")
    assert main(["simulate", "--config", cfg, "--out", out, "--threads", "1"]) == 0
    with open(Path(out) / "trajectory.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "p1", "q1"]
    assert len(rows) == 1 + 17  # header + (1/0.0625 + 1) states
    assert float(rows[1][0]) == 0.0 and float(rows[-1][0]) == 1.0
    s = _read_summary(out)
    assert s["kind"] == "simulate"  # subcommand overrides the config kind
    assert s["h"] == 0.0625 and s["steps"] == 16
    assert len(s["terminal_state"]) == 2
    assert s["max_residual"] <= 1e-12
    assert s["max_abs_denergy"] <= 1e-9
    assert s["newton_max_iters"] >= 1
    assert s["assumptions_pass"] is True
    assert s["backend"] in ("compiled", "python")


def test_converge_strong_end_to_end_and_rerun_bytes(tmp_path):
    cfg = _write_cfg(tmp_path, BASE)
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    args = ["converge-strong", "--config", cfg, "--threads", "1"]
    assert main(args + ["--out", out1]) == 0
    assert main(args + ["--out", out2]) == 0

    with open(Path(out1) / "strong_convergence.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["h", "rms_error", "ci_low", "ci_high"]
    assert [float(r[0]) for r in rows[1:]] == [0.0625, 0.03125]

    s = _read_summary(out1)
    assert math.isfinite(s["fitted_slope"])
    assert s["failed_samples"] == 0 and s["surviving_samples"] == 20
    assert s["energy_pass"] is True and s["energy_gate"] == 1e-9
    assert s["h_values"] == [0.0625, 0.03125]

    # same seed, same artifacts, to the byte
    a = (Path(out1) / "strong_convergence.csv").read_bytes()
    b = (Path(out2) / "strong_convergence.csv").read_bytes()
    assert a == b
    s2 = _read_summary(out2)
    s.pop("runtime_seconds"), s2.pop("runtime_seconds")
    assert s == s2


def test_seed_override_changes_results(tmp_path):
    cfg = _write_cfg(tmp_path, BASE)
    out1, out2 = str(tmp_path / "s11"), str(tmp_path / "s12")
    assert main(["converge-strong", "--config", cfg, "--out", out1,
                 "--threads", "1"]) == 0
    assert main(["converge-strong", "--config", cfg, "--out", out2,
                 "--threads", "1", "--seed", "12"]) == 0
    s1, s2 = _read_summary(out1), _read_summary(out2)
    assert s1["seed"] == 11 and s2["seed"] == 12
    assert s1["rms_errors"] != s2["rms_errors"]


def test_config_hash_matches_git_blob_convention(tmp_path):
    cfg = _write_cfg(tmp_path, BASE)
    out = str(tmp_path / "h")
    assert main(["energy-check", "--config", cfg, "--out", out,
                 "--threads", "1"]) == 0
    data = Path(cfg).read_bytes()
    expected = hashlib.sha1(
        b"blob " + str(len(data)).encode() + b"\0" + data
    ).hexdigest()
    s = _read_summary(out)
    assert s["config_blob_sha1"] == expected
    assert s["energy_pass"] is True


def test_converge_density_artifacts_roundtrip(tmp_path):
    text = BASE.replace("kind = converge-strong", "kind = converge-density")
    text = text.replace("h_list = 0.0625, 0.03125", "h_list = 0.125, 0.0625")
    text = text.replace("h_ref = 0.00390625", "h_ref = 0.015625")
    text = text.replace("samples = 20", "samples = 30")
    cfg = _write_cfg(tmp_path, text)
    out = Path(tmp_path / "dens")
    assert main(["converge-density", "--config", cfg, "--out", str(out),
                 "--threads", "1"]) == 0

    s = _read_summary(out)
    assert len(s["sup_distances"]) == 2
    assert s["distance_is_surrogate"] is True
    assert s["bandwidths"] == [0.125, 0.0625]
    assert isinstance(s["monotone_ok"], bool)

    with open(out / "density_distances.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["h", "sup_distance", "ci_low", "ci_high", "bandwidth"]

    # the binary grid and the CSV table carry the same estimate
    grid = read_density_binary(out / "density_scheme_h0.125.bin")
    assert grid.dim == 2 and grid.bandwidth == 0.125
    assert grid.values.shape == (128, 128)
    with open(out / "density_scheme_h0.125.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x1", "x2", "value"]
    csv_vals = np.array([float(r[2]) for r in rows[1:]]).reshape(128, 128)
    assert np.array_equal(csv_vals, grid.values)
    csv_x1 = np.array(sorted({float(r[0]) for r in rows[1:]}))
    assert np.allclose(csv_x1, grid.axes[0], rtol=0, atol=0)

    ref = read_density_binary(out / "density_reference_h0.125.bin")
    assert ref.values.shape == (128, 128)


def test_malliavin_diagnose_end_to_end(tmp_path):
    text = BASE.replace("kind = converge-strong", "kind = malliavin-diagnose")
    text = text.replace("h_list = 0.0625, 0.03125", "h_list = 0.125, 0.0625")
    text = text.replace("samples = 20", "samples = 100")
    cfg = _write_cfg(tmp_path, text)
    out = Path(tmp_path / "mal")
    assert main(["malliavin-diagnose", "--config", cfg, "--out", str(out),
                 "--threads", "1"]) == 0
    s = _read_summary(out)
    assert "inv_lambda_min_growth_exponent" in s
    assert s["h0.125_lambda_min_min"] > 0
    assert s["h0.0625_lambda_min_min"] > 0
    with open(out / "malliavin.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["h", "sample", "lambda_min", "det_gamma", "inv_det"]
    assert len(rows) == 1 + 2 * 100
    assert min(float(r[2]) for r in rows[1:]) > 0


def test_expmoment_end_to_end(tmp_path):
    text = BASE.replace("kind = converge-strong", "kind = expmoment-check")
    cfg = _write_cfg(tmp_path, text)
    out = Path(tmp_path / "mom")
    assert main(["expmoment-check", "--config", cfg, "--out", str(out),
                 "--threads", "1"]) == 0
    s = _read_summary(out)
    assert s["bound"] == pytest.approx(math.exp(3.0), rel=1e-12)
    assert s["moment_pass"] is True and s["overflow_count"] == 0
    with open(out / "expmoment.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "estimate", "bound"]
    assert len(rows) == 1 + 17


# ---------------------------------------------------------------------------
# Exit codes


def test_exit_1_unreadable_config(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "nope.cfg")]) == 1
    assert "cannot read" in capsys.readouterr().err


def test_exit_1_parse_error(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, BASE + "junk line\n")
    assert main(["simulate", "--config", cfg]) == 1
    err = capsys.readouterr().err
    assert "config error" in err and "key = value" in err


def test_exit_1_step_size_guard(tmp_path, capsys):
    # K = 100 for q^4 - 50 q^2, so h = 0.5 > 2/sqrt(K) = 0.2 is rejected
    text = (
        "[model]\npotential = custom_poly\ncoeffs = 1.0: 4, -50.0: 2\n"
        "v = 1.0\nx0 = 1.0, 1.0\n"
        "[experiment]\nkind = simulate\nh_list = 0.5\n"
    )
    cfg = _write_cfg(tmp_path, text)
    assert main(["simulate", "--config", cfg, "--out",
                 str(tmp_path / "o")]) == 1
    assert "config error" in capsys.readouterr().err


def test_exit_1_runner_preconditions(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, BASE.replace("samples = 20", "samples = 99"))
    assert main(["malliavin-diagnose", "--config", cfg, "--out",
                 str(tmp_path / "o"), "--threads", "1"]) == 1
    assert "samples >= 100" in capsys.readouterr().err


def test_exit_1_rank_deficient_noise(tmp_path, capsys):
    text = (
        "[model]\npotential = coupled2d\nm = 2\nv = 1.0\n"
        "sigma = 1.0, 1.0, 1.0, 1.0\nx0 = 1.0, 1.0, 1.0, 1.0\n"
        "[experiment]\nh_list = 0.125, 0.0625\nsamples = 100\n"
    )
    cfg = _write_cfg(tmp_path, text)
    assert main(["malliavin-diagnose", "--config", cfg, "--out",
                 str(tmp_path / "o"), "--threads", "1"]) == 1
    assert "rank" in capsys.readouterr().err


def test_exit_2_all_samples_overflow(tmp_path, capsys):
    # U(X0) = 1e8 puts every sample past the exponential range at once
    text = BASE.replace("x0 = 1.0, 1.0", "x0 = 0.0, 100.0")
    cfg = _write_cfg(tmp_path, text)
    assert main(["expmoment-check", "--config", cfg, "--out",
                 str(tmp_path / "o"), "--threads", "1"]) == 2
    assert "experiment failed" in capsys.readouterr().err
