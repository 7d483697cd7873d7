"""Config-driven command line front end.

Reads an INI-style config with [model], [integrator], [experiment], and
[output] sections, runs the named experiment, and writes CSV tables plus a
flat summary.json carrying the inputs, a git-style content hash of the
config, the results, and pass/fail flags.  Exit codes: 0 success, 1 config
error, 2 experiment-level failure.

Every run is deterministic for a fixed seed: reductions happen in sample
order and CSV floats are printed with 17 significant digits, so repeated
runs diff byte-identically.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import struct
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._kernels import BACKEND
from .density import (
    DensityGrid,
    density_convergence,
    monotone_report,
)
from .experiments import (
    ExperimentError,
    energy_audit,
    exp_moment_monitor,
    strong_error,
)
from .integrators import (
    SCHEMES,
    IntegrationError,
    NewtonDivergenceError,
    integrate_with_stats,
    make_avf_config,
)
from .malliavin import gamma_path, nondegeneracy_report
from .model import LangevinModel, State, builtin_potential, validate_assumptions
from .noise import generate_path, sample_key

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "run",
    "main",
    "read_density_binary",
]

KINDS = (
    "simulate",
    "converge-strong",
    "converge-density",
    "malliavin-diagnose",
    "energy-check",
    "expmoment-check",
)

_DENSITY_MAGIC = b"DGRD"
_DENSITY_VERSION = 1

# per-step energy defect gate reported by energy-check and the inline audits
_ENERGY_GATE = 1e-9


class ConfigError(ValueError):
    """Config parse or validation failure, with line-numbered messages."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(
            "line %d: %s" % (ln, msg) if ln else msg for ln, msg in self.errors
        ))


@dataclass(frozen=True)
class ModelSection:
    potential: str
    coeffs: tuple | None
    m: int
    d: int
    v: float
    sigma: tuple
    x0: tuple
    hessian_lower_bound: float | None
    lower_offset: float | None


@dataclass(frozen=True)
class IntegratorSection:
    scheme: str = "avf_split"
    newton_tol: float = 1e-12
    newton_max_iter: int = 50
    quadrature_nodes: int | None = None


@dataclass(frozen=True)
class ExperimentSection:
    kind: str
    T: float = 1.0
    h_list: tuple = ()
    h_ref: float | None = None
    samples: int = 1
    seed: int = 0
    beta: float = 1.0
    bandwidth_rule: float = 1.0


@dataclass(frozen=True)
class OutputSection:
    directory: str = "out"
    formats: tuple = ("csv", "json")


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection
    integrator: IntegratorSection
    experiment: ExperimentSection
    output: OutputSection
    config_text: str = dataclasses.field(default="", repr=False, compare=False)


# ---------------------------------------------------------------------------
# Parsing


def _to_int(s: str) -> int:
    return int(s, 0)


def _to_float(s: str) -> float:
    x = float(s)
    if not math.isfinite(x):
        raise ValueError("value must be finite")
    return x


def _to_float_list(s: str) -> tuple:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(_to_float(p) for p in parts)


def _to_str_list(s: str) -> tuple:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _to_terms(s: str) -> tuple:
    """Sparse polynomial terms: 'coeff: e1 e2 ..., coeff: e1 e2 ...'."""
    terms = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ValueError("term %r needs the form 'coeff: exponents'" % part)
        c_str, _, e_str = part.partition(":")
        expo = tuple(int(tok) for tok in e_str.split())
        if not expo or any(e < 0 for e in expo):
            raise ValueError("term %r needs nonnegative integer exponents" % part)
        terms.append((_to_float(c_str.strip()), expo))
    if not terms:
        raise ValueError("expected at least one polynomial term")
    return tuple(terms)


# key -> (converter, required). None converter keeps the raw string.
_SCHEMA = {
    "model": {
        "potential": (str, True),
        "coeffs": (_to_terms, False),
        "m": (_to_int, False),
        "d": (_to_int, False),
        "v": (_to_float, True),
        "sigma": (_to_float_list, False),
        "x0": (_to_float_list, True),
        "hessian_lower_bound": (_to_float, False),
        "lower_offset": (_to_float, False),
    },
    "integrator": {
        "scheme": (str, False),
        "newton_tol": (_to_float, False),
        "newton_max_iter": (_to_int, False),
        "quadrature_nodes": (_to_int, False),
    },
    "experiment": {
        "kind": (str, False),
        "T": (_to_float, False),
        "h_list": (_to_float_list, False),
        "h_ref": (_to_float, False),
        "samples": (_to_int, False),
        "seed": (_to_int, False),
        "beta": (_to_float, False),
        "bandwidth_rule": (_to_float, False),
    },
    "output": {
        "directory": (str, False),
        "formats": (_to_str_list, False),
    },
}


def _scan_sections(text: str):
    """Raw INI scan: {section: {key: (value, line)}} plus error list."""
    sections: dict = {}
    errors: list = []
    current = None
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                errors.append((ln, "malformed section header %r" % line))
                current = None
                continue
            name = line[1:-1].strip()
            if name not in _SCHEMA:
                errors.append((ln, "unknown section [%s]" % name))
                current = None
                continue
            current = sections.setdefault(name, {})
            current_name = name
            continue
        if "=" not in line:
            errors.append((ln, "expected 'key = value', got %r" % line))
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if current is None:
            errors.append((ln, "key %r outside of any section" % key))
            continue
        if key not in _SCHEMA[current_name]:
            errors.append((ln, "unknown key %r in section [%s]" % (key, current_name)))
            continue
        if key in current:
            errors.append((ln, "duplicate key %r" % key))
            continue
        current[key] = (value, ln)
    return sections, errors


def _is_pow2_multiple(h: float, h_ref: float) -> bool:
    if h_ref <= 0 or h < h_ref:
        return False
    ratio = h / h_ref
    k = round(math.log2(ratio))
    return k >= 0 and 2.0**k == ratio


def _divides(h: float, T: float) -> bool:
    if h <= 0 or h > T:
        return False
    n = T / h
    return round(n) == n and n >= 1


def parse_config(text: str) -> RunConfig:
    """Parse and validate the INI-style config; raises ConfigError on issues.

    Unknown sections and keys are errors, not warnings; every message carries
    the offending line number.
    """
    sections, errors = _scan_sections(text)
    if "model" not in sections:
        errors.append((0, "missing [model] section"))
        raise ConfigError(errors)

    values: dict = {}
    lines: dict = {}
    for sec_name, schema in _SCHEMA.items():
        sec = sections.get(sec_name, {})
        out: dict = {}
        for key, (conv, required) in schema.items():
            if key in sec:
                raw, ln = sec[key]
                lines[(sec_name, key)] = ln
                try:
                    out[key] = conv(raw)
                except ValueError as err:
                    errors.append((ln, "bad value for %s.%s: %s" % (sec_name, key, err)))
            elif required:
                errors.append((0, "missing required key %s.%s" % (sec_name, key)))
        values[sec_name] = out
    if errors:
        raise ConfigError(errors)

    def where(sec, key):
        return lines.get((sec, key), 0)

    mv = values["model"]
    m = mv.get("m", 1)
    d = mv.get("d", m)
    if m < 1 or d < 1:
        errors.append((where("model", "m"), "m and d must be positive"))
    sigma = mv.get("sigma")
    if sigma is None:
        sigma = tuple(
            1.0 if i == j else 0.0 for i in range(m) for j in range(d)
        )
    if len(sigma) != m * d:
        errors.append((
            where("model", "sigma"),
            "sigma needs m*d = %d entries (row-major), got %d" % (m * d, len(sigma)),
        ))
    x0 = mv.get("x0", ())
    if len(x0) != 2 * m:
        errors.append((
            where("model", "x0"),
            "x0 needs 2m = %d entries (momentum then position), got %d" % (2 * m, len(x0)),
        ))
    if mv["potential"] == "custom_poly" and "coeffs" not in mv:
        errors.append((where("model", "potential"), "custom_poly requires model.coeffs"))

    iv = values["integrator"]
    scheme = iv.get("scheme", "avf_split")
    if scheme not in SCHEMES:
        errors.append((
            where("integrator", "scheme"),
            "unknown scheme %r; choose one of %s" % (scheme, ", ".join(SCHEMES)),
        ))
    if iv.get("newton_tol", 1e-12) <= 0:
        errors.append((where("integrator", "newton_tol"), "newton_tol must be positive"))
    if iv.get("newton_max_iter", 50) < 1:
        errors.append((where("integrator", "newton_max_iter"), "newton_max_iter must be >= 1"))

    ev = values["experiment"]
    kind = ev.get("kind")
    if kind is not None and kind not in KINDS:
        errors.append((
            where("experiment", "kind"),
            "unknown kind %r; choose one of %s" % (kind, ", ".join(KINDS)),
        ))
    T = ev.get("T", 1.0)
    if T <= 0:
        errors.append((where("experiment", "T"), "T must be positive"))
    h_list = tuple(sorted(set(ev.get("h_list", ())), reverse=True))
    for h in h_list:
        if not _divides(h, T):
            errors.append((
                where("experiment", "h_list"),
                "h = %.17g does not divide T = %.17g" % (h, T),
            ))
    h_ref = ev.get("h_ref")
    if h_ref is not None:
        for h in h_list:
            if not _is_pow2_multiple(h, h_ref):
                errors.append((
                    where("experiment", "h_list"),
                    "h = %.17g is not a power-of-two multiple of h_ref = %.17g" % (h, h_ref),
                ))
    if ev.get("samples", 1) < 1:
        errors.append((where("experiment", "samples"), "samples must be >= 1"))
    if ev.get("seed", 0) < 0:
        errors.append((where("experiment", "seed"), "seed must be a nonnegative integer"))
    if ev.get("bandwidth_rule", 1.0) <= 0:
        errors.append((where("experiment", "bandwidth_rule"), "bandwidth_rule must be positive"))

    ov = values["output"]
    formats = tuple(ov.get("formats", ("csv", "json")))
    for f in formats:
        if f not in ("csv", "json"):
            errors.append((
                where("output", "formats"),
                "unknown output format %r (csv and json are supported)" % f,
            ))
    if errors:
        raise ConfigError(errors)

    model = ModelSection(
        potential=mv["potential"],
        coeffs=mv.get("coeffs"),
        m=m,
        d=d,
        v=mv["v"],
        sigma=tuple(sigma),
        x0=tuple(x0),
        hessian_lower_bound=mv.get("hessian_lower_bound"),
        lower_offset=mv.get("lower_offset"),
    )
    integrator = IntegratorSection(
        scheme=scheme,
        newton_tol=iv.get("newton_tol", 1e-12),
        newton_max_iter=iv.get("newton_max_iter", 50),
        quadrature_nodes=iv.get("quadrature_nodes"),
    )
    experiment = ExperimentSection(
        kind=kind if kind is not None else "simulate",
        T=T,
        h_list=h_list,
        h_ref=h_ref,
        samples=ev.get("samples", 1),
        seed=ev.get("seed", 0),
        beta=ev.get("beta", 1.0),
        bandwidth_rule=ev.get("bandwidth_rule", 1.0),
    )
    output = OutputSection(directory=ov.get("directory", "out"), formats=formats)
    return RunConfig(model, integrator, experiment, output, config_text=text)


def build_model(cfg: RunConfig) -> LangevinModel:
    """Instantiate the model a config describes."""
    mc = cfg.model
    potential = builtin_potential(
        mc.potential,
        m=mc.m,
        coeffs=mc.coeffs,
        hessian_lower_bound=mc.hessian_lower_bound,
        lower_offset=mc.lower_offset,
    )
    sigma = np.array(mc.sigma, dtype=float).reshape(mc.m, mc.d)
    x0 = State(p=np.array(mc.x0[: mc.m]), q=np.array(mc.x0[mc.m :]))
    return LangevinModel(
        m=mc.m, d=mc.d, v=mc.v, sigma=sigma, potential=potential, x0=x0
    )


# ---------------------------------------------------------------------------
# Serialization


def _fmt_float(x) -> str:
    return "%.17g" % float(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([
                _fmt_float(c) if isinstance(c, (float, np.floating)) else str(c)
                for c in row
            ])


def _git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _write_density_binary(path: Path, grid: DensityGrid) -> None:
    """Compact grid table: magic, version, dim, bandwidth, axes, values (LE)."""
    with open(path, "wb") as fh:
        fh.write(_DENSITY_MAGIC)
        fh.write(struct.pack("<II", _DENSITY_VERSION, grid.dim))
        fh.write(struct.pack("<d", grid.bandwidth))
        for axis in grid.axes:
            fh.write(struct.pack("<I", len(axis)))
            fh.write(np.ascontiguousarray(axis, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())


def read_density_binary(path) -> DensityGrid:
    """Read back a grid written by the converge-density command."""
    data = Path(path).read_bytes()
    if data[:4] != _DENSITY_MAGIC:
        raise ValueError("not a density grid file")
    version, dim = struct.unpack_from("<II", data, 4)
    if version != _DENSITY_VERSION:
        raise ValueError("unsupported density grid version %d" % version)
    (bandwidth,) = struct.unpack_from("<d", data, 12)
    off = 20
    axes = []
    for _ in range(dim):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        axes.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).copy())
        off += 8 * n
    shape = tuple(len(a) for a in axes)
    count = int(np.prod(shape))
    values = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
    return DensityGrid(dim=dim, axes=tuple(axes), values=values, bandwidth=bandwidth)


def _write_density_grid_csv(path: Path, grid: DensityGrid) -> None:
    header = ["x%d" % (i + 1) for i in range(grid.dim)] + ["value"]
    mesh = np.meshgrid(*grid.axes, indexing="ij")
    coords = [g.reshape(-1) for g in mesh]
    flat = grid.values.reshape(-1)
    rows = (
        [float(c[i]) for c in coords] + [float(flat[i])] for i in range(flat.size)
    )
    _write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# Experiment execution


def _summary_base(cfg: RunConfig, model: LangevinModel, threads: int | None) -> dict:
    ec = cfg.experiment
    return {
        "kind": ec.kind,
        "potential": cfg.model.potential,
        "m": cfg.model.m,
        "d": cfg.model.d,
        "v": cfg.model.v,
        "sigma": list(cfg.model.sigma),
        "x0": list(cfg.model.x0),
        "scheme": cfg.integrator.scheme,
        "newton_tol": cfg.integrator.newton_tol,
        "t_horizon": ec.T,
        "h_values": list(ec.h_list),
        "h_ref": ec.h_ref,
        "samples": ec.samples,
        "seed": ec.seed,
        "threads": threads if threads is not None else (os.cpu_count() or 1),
        "backend": BACKEND,
        "config_blob_sha1": _git_blob_sha1(cfg.config_text.encode("utf-8")),
        "assumptions_pass": bool(validate_assumptions(model)["all_pass"]),
    }


def _default_h_ref(cfg: RunConfig, h: float) -> float:
    # monitors that only need one coarse grid still build the noise on a
    # finer ladder so the friction convolution bias stays subdominant
    return cfg.experiment.h_ref if cfg.experiment.h_ref is not None else h / 16.0


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError([(0, msg)])


def _run_simulate(cfg, model, out, threads, summary):
    ec = cfg.experiment
    _require(len(ec.h_list) >= 1, "simulate needs experiment.h_list (the first entry is used)")
    h = ec.h_list[0]
    h_ref = _default_h_ref(cfg, h)
    path = generate_path(sample_key(ec.seed, 0), ec.T, h_ref, model.d)
    avf_cfg = None
    if cfg.integrator.scheme == "avf_split":
        avf_cfg = make_avf_config(
            model, h, cfg.integrator.newton_tol,
            cfg.integrator.newton_max_iter, cfg.integrator.quadrature_nodes,
        )
    traj, stats = integrate_with_stats(model, cfg.integrator.scheme, path, h, avf_cfg)
    if "csv" in cfg.output.formats:
        header = (
            ["t"]
            + ["p%d" % (i + 1) for i in range(model.m)]
            + ["q%d" % (i + 1) for i in range(model.m)]
        )
        rows = (
            [float(n * h)] + [float(x) for x in traj[n]] for n in range(traj.shape[0])
        )
        _write_csv(out / "trajectory.csv", header, rows)
    summary.update({
        "h": h,
        "steps": traj.shape[0] - 1,
        "terminal_state": [float(x) for x in traj[-1]],
        "newton_max_iters": stats.newton_max_iters,
        "max_residual": stats.max_residual,
        "max_abs_denergy": stats.max_abs_denergy,
    })


def _run_converge_strong(cfg, model, out, threads, summary):
    ec = cfg.experiment
    _require(len(ec.h_list) >= 2, "converge-strong needs at least two entries in experiment.h_list")
    _require(ec.h_ref is not None, "converge-strong needs experiment.h_ref")
    _require(ec.samples >= 2, "converge-strong needs experiment.samples >= 2")
    res = strong_error(
        model, ec.h_list, ec.h_ref, ec.samples, ec.seed,
        scheme=cfg.integrator.scheme, T=ec.T, threads=threads,
        newton_tol=cfg.integrator.newton_tol,
        quadrature_nodes=cfg.integrator.quadrature_nodes,
    )
    if "csv" in cfg.output.formats:
        _write_csv(
            out / "strong_convergence.csv",
            ["h", "rms_error", "ci_low", "ci_high"],
            (
                [res.h_values[j], res.rms_errors[j], res.error_ci[j][0], res.error_ci[j][1]]
                for j in range(len(res.h_values))
            ),
        )
    summary.update({
        "rms_errors": [float(x) for x in res.rms_errors],
        "fitted_slope": res.fitted_slope,
        "slope_ci_low": res.slope_ci[0],
        "slope_ci_high": res.slope_ci[1],
        "failed_samples": res.failed_samples,
        "surviving_samples": res.sample_count,
        "max_abs_denergy": res.max_abs_denergy,
        "energy_gate": _ENERGY_GATE,
        "energy_pass": bool(res.max_abs_denergy <= _ENERGY_GATE),
        "slope_in_unit_band": bool(0.85 <= res.fitted_slope <= 1.15),
    })


def _run_converge_density(cfg, model, out, threads, summary):
    ec = cfg.experiment
    _require(len(ec.h_list) >= 2, "converge-density needs at least two entries in experiment.h_list")
    _require(ec.h_ref is not None, "converge-density needs experiment.h_ref")
    _require(ec.samples >= 2, "converge-density needs experiment.samples >= 2")
    res = density_convergence(
        model, ec.h_list, ec.h_ref, ec.samples,
        rho_rule=ec.bandwidth_rule, seed=ec.seed, T=ec.T, threads=threads,
    )
    mono = monotone_report(res.distances, res.distance_ci)
    if "csv" in cfg.output.formats:
        _write_csv(
            out / "density_distances.csv",
            ["h", "sup_distance", "ci_low", "ci_high", "bandwidth"],
            (
                [res.h_values[j], res.distances[j], res.distance_ci[j][0],
                 res.distance_ci[j][1], res.bandwidths[j]]
                for j in range(len(res.h_values))
            ),
        )
        for j, h in enumerate(res.h_values):
            tag = "%.17g" % h
            g_avf, g_ref = res.grids[j]
            _write_density_grid_csv(out / ("density_scheme_h%s.csv" % tag), g_avf)
            _write_density_grid_csv(out / ("density_reference_h%s.csv" % tag), g_ref)
            _write_density_binary(out / ("density_scheme_h%s.bin" % tag), g_avf)
            _write_density_binary(out / ("density_reference_h%s.bin" % tag), g_ref)
    summary.update({
        "bandwidths": [float(b) for b in res.bandwidths],
        "sup_distances": [float(x) for x in res.distances],
        "fitted_slope": res.fitted_slope,
        "slope_ci_low": res.slope_ci[0],
        "slope_ci_high": res.slope_ci[1],
        "failed_samples": res.failed_samples,
        "surviving_samples": res.sample_count,
        "strictly_decreasing": mono["strictly_decreasing"],
        "inversions": mono["inversions"],
        "ci_covered_inversions": mono["ci_covered_inversions"],
        "monotone_ok": mono["monotone_ok"],
        # grid sup distance of mollified estimates, not a function-space norm
        "distance_is_surrogate": True,
    })


def _gamma_worker(args):
    model, hs, h_ref, T, key, n_q = args
    path = generate_path(key, T, h_ref, model.d)
    out = []
    for h in hs:
        traj, _ = integrate_with_stats(model, "avf_split", path, h)
        gammas = gamma_path(model, traj, h, n_q)
        out.append(gammas[-1])
    return out


def _run_malliavin(cfg, model, out, threads, summary):
    from .experiments import _map_ordered  # shared pool helper

    ec = cfg.experiment
    _require(len(ec.h_list) >= 2, "malliavin-diagnose needs at least two entries in experiment.h_list")
    _require(ec.samples >= 100, "malliavin-diagnose needs experiment.samples >= 100")
    rank = int(np.linalg.matrix_rank(model.sigma_sq))
    _require(
        rank == model.m,
        "malliavin-diagnose needs rank(sigma sigma^T) = m; got rank %d < %d" % (rank, model.m),
    )
    hs = ec.h_list
    h_ref = ec.h_ref if ec.h_ref is not None else hs[-1] / 16.0
    items = [
        (model, hs, h_ref, ec.T, sample_key(ec.seed, i), cfg.integrator.quadrature_nodes)
        for i in range(ec.samples)
    ]
    results = _map_ordered(_gamma_worker, items, threads)
    gammas_by_h = [
        np.stack([results[i][j] for i in range(ec.samples)]) for j in range(len(hs))
    ]
    report = nondegeneracy_report(hs, gammas_by_h)
    if "csv" in cfg.output.formats:
        def rows():
            for j, h in enumerate(hs):
                evals = np.linalg.eigvalsh(gammas_by_h[j])
                dets = np.prod(evals, axis=1)
                for i in range(ec.samples):
                    yield [h, i, float(evals[i, 0]), float(dets[i]), float(1.0 / dets[i])]
        _write_csv(
            out / "malliavin.csv",
            ["h", "sample", "lambda_min", "det_gamma", "inv_det"],
            rows(),
        )
    flat = {}
    for stats in report["per_h"]:
        tag = "%.17g" % stats["h"]
        for key, val in stats.items():
            if key != "h":
                flat["h%s_%s" % (tag, key)] = val
    summary.update(flat)
    summary.update({
        "inv_det_growth_exponent": report["inv_det_growth_exponent"],
        "inv_lambda_min_growth_exponent": report["inv_lambda_min_growth_exponent"],
        "inv_lambda_min_growth_ok": report["inv_lambda_min_growth_ok"],
    })


def _energy_worker(args):
    model, h, h_ref, T, key = args
    path = generate_path(key, T, h_ref, model.d)
    return energy_audit(model, path, h)


def _run_energy(cfg, model, out, threads, summary):
    from .experiments import _map_ordered

    ec = cfg.experiment
    _require(len(ec.h_list) >= 1, "energy-check needs experiment.h_list (the first entry is used)")
    h = ec.h_list[0]
    h_ref = _default_h_ref(cfg, h)
    items = [(model, h, h_ref, ec.T, sample_key(ec.seed, i)) for i in range(ec.samples)]
    maxima = _map_ordered(_energy_worker, items, threads)
    if "csv" in cfg.output.formats:
        _write_csv(
            out / "energy.csv",
            ["h", "sample", "max_abs_denergy"],
            ([h, i, float(maxima[i])] for i in range(ec.samples)),
        )
    worst = float(np.max(maxima))
    summary.update({
        "h": h,
        "max_abs_denergy": worst,
        "energy_gate": _ENERGY_GATE,
        "energy_pass": bool(worst <= _ENERGY_GATE),
    })


def _run_expmoment(cfg, model, out, threads, summary):
    ec = cfg.experiment
    _require(len(ec.h_list) >= 1, "expmoment-check needs experiment.h_list (the first entry is used)")
    h = ec.h_list[0]
    series = exp_moment_monitor(
        model, h, ec.samples, ec.beta, seed=ec.seed, T=ec.T, threads=threads,
    )
    if "csv" in cfg.output.formats:
        _write_csv(
            out / "expmoment.csv",
            ["t", "estimate", "bound"],
            (
                [series.times[n], series.values[n], series.bound]
                for n in range(len(series.times))
            ),
        )
    peak = float(max(series.values))
    overflow_fraction = series.overflow_count / ec.samples
    summary.update({
        "h": h,
        "beta": ec.beta,
        "max_estimate": peak,
        "bound": series.bound,
        "bound_ratio": peak / series.bound,
        "overflow_count": series.overflow_count,
        "overflow_fraction": overflow_fraction,
        "moment_pass": bool(peak <= 1.5 * series.bound and overflow_fraction < 1e-3),
    })


_RUNNERS = {
    "simulate": _run_simulate,
    "converge-strong": _run_converge_strong,
    "converge-density": _run_converge_density,
    "malliavin-diagnose": _run_malliavin,
    "energy-check": _run_energy,
    "expmoment-check": _run_expmoment,
}


def run(cfg: RunConfig, threads: int | None = None) -> int:
    """Execute the configured experiment and write its artifacts.

    Returns the process exit code: 0 on success, 1 for config-level errors
    (including the step-size solvability guard), 2 for experiment-level
    failures such as an excess Newton abort rate.
    """
    started = time.monotonic()
    try:
        model = build_model(cfg)
        for h in cfg.experiment.h_list or ():
            if cfg.integrator.scheme == "avf_split":
                make_avf_config(
                    model, h, cfg.integrator.newton_tol,
                    cfg.integrator.newton_max_iter, cfg.integrator.quadrature_nodes,
                )
        runner = _RUNNERS.get(cfg.experiment.kind)
        if runner is None:
            raise ConfigError([(0, "unknown experiment kind %r" % cfg.experiment.kind)])
        out = Path(cfg.output.directory)
        out.mkdir(parents=True, exist_ok=True)
        summary = _summary_base(cfg, model, threads)
    except (ConfigError, ValueError) as err:
        print("config error: %s" % err, file=sys.stderr)
        return 1

    try:
        runner(cfg, model, out, threads, summary)
    except ConfigError as err:
        print("config error: %s" % err, file=sys.stderr)
        return 1
    except (ExperimentError, IntegrationError, NewtonDivergenceError, ValueError) as err:
        print("experiment failed: %s" % err, file=sys.stderr)
        return 2

    summary["runtime_seconds"] = time.monotonic() - started
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="splitavf",
        description="Langevin dynamics via an energy-preserving split scheme: "
        "simulation, convergence measurement, and nondegeneracy diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "integrate one sample path and write the trajectory",
        "converge-strong": "coupled-path strong-convergence ladder with slope fit",
        "converge-density": "kernel-density distance ladder against the fine reference",
        "malliavin-diagnose": "sensitivity-covariance spectra across step sizes",
        "energy-check": "per-step Hamiltonian defect of the implicit substep",
        "expmoment-check": "exponential-moment monitor against its analytic cap",
    }
    for name in KINDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="path to the INI config")
        p.add_argument("--seed", type=int, default=None, help="override experiment.seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes (default: available cores)")
        p.add_argument("--out", default=None, help="override output.directory")
    args = parser.parse_args(argv)

    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as err:
        print("config error: cannot read %s: %s" % (args.config, err), file=sys.stderr)
        return 1
    try:
        cfg = parse_config(text)
    except ConfigError as err:
        print("config error:\n%s" % err, file=sys.stderr)
        return 1

    # the subcommand names the experiment; flags override config fields
    experiment = dataclasses.replace(
        cfg.experiment,
        kind=args.command,
        **({"seed": args.seed} if args.seed is not None else {}),
    )
    output = cfg.output
    if args.out is not None:
        output = dataclasses.replace(output, directory=args.out)
    cfg = dataclasses.replace(cfg, experiment=experiment, output=output)
    if args.seed is not None and args.seed < 0:
        print("config error: seed must be nonnegative", file=sys.stderr)
        return 1
    return run(cfg, threads=args.threads)
