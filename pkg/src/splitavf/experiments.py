"""Strong-convergence harness, slope fitting, energy and moment monitors.

The coupling design: one fine-step Wiener path per sample drives both the
split scheme at every coarse step h and the tamed-Euler reference at h_ref,
so the terminal distance isolates discretization error.  All reductions run
in sample order, which keeps repeated runs bit-identical.
"""

from __future__ import annotations

import math
import os
import sys
from dataclasses import dataclass
from multiprocessing import get_context

import numpy as np

from .integrators import (
    IntegrationError,
    NewtonDivergenceError,
    integrate_with_stats,
    make_avf_config,
)
from .model import LangevinModel, hamiltonian, potential_values
from .noise import PathHierarchy, generate_path, sample_key

__all__ = [
    "ConvergenceResult",
    "MonitorSeries",
    "ExperimentError",
    "strong_error",
    "fit_slope",
    "energy_audit",
    "exp_moment_monitor",
]

# exp() arguments above this overflow a double; such samples are excluded
_LOG_MAX = math.log(sys.float_info.max)

_BOOTSTRAP_REPS = 200
_BOOTSTRAP_SEED = 0x5B0075


class ExperimentError(RuntimeError):
    """An experiment-level failure (excess solver aborts, empty results)."""


@dataclass(frozen=True)
class ConvergenceResult:
    """Terminal RMS errors against a coupled fine reference, with a slope fit.

    error_ci holds a bootstrap 95% interval per step size; slope_ci the same
    for the fitted log-log slope.  failed_samples counts Newton aborts (those
    samples are dropped from every column).  max_abs_denergy is the largest
    per-step Hamiltonian defect seen across all split-scheme runs.
    """

    h_values: tuple[float, ...]
    rms_errors: tuple[float, ...]
    sample_count: int
    fitted_slope: float
    slope_ci: tuple[float, float]
    error_ci: tuple[tuple[float, float], ...]
    failed_samples: int = 0
    max_abs_denergy: float = 0.0

    def __post_init__(self):
        h = np.asarray(self.h_values, dtype=float)
        if h.size < 1 or np.any(np.diff(h) >= 0):
            raise ValueError("h_values must be strictly decreasing")
        e = np.asarray(self.rms_errors, dtype=float)
        if e.size != h.size or not np.all(np.isfinite(e)) or np.any(e < 0):
            raise ValueError("rms_errors must be finite and nonnegative, one per h")


@dataclass(frozen=True)
class MonitorSeries:
    """A per-time Monte Carlo estimate with an analytic cap where available."""

    times: tuple[float, ...]
    values: tuple[float, ...]
    bound: float
    overflow_count: int = 0
    sample_count: int = 0

    def __post_init__(self):
        if len(self.times) != len(self.values):
            raise ValueError("times and values must have the same length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("monitor values must be finite")


def _resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = os.cpu_count() or 1
    return max(1, int(threads))


def _map_ordered(fn, items, threads: int | None):
    """Order-preserving map, forked workers when threads > 1."""
    threads = _resolve_threads(threads)
    if threads == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    try:
        ctx = get_context("fork")
    except ValueError:
        ctx = get_context()
    chunk = max(1, len(items) // (8 * threads))
    with ctx.Pool(threads) as pool:
        return pool.map(fn, items, chunksize=chunk)


def _check_ladder(h_list, h_ref: float, T: float) -> tuple[float, ...]:
    hs = tuple(float(h) for h in h_list)
    if len(hs) < 1:
        raise ValueError("h_list must be nonempty")
    if any(hs[i + 1] >= hs[i] for i in range(len(hs) - 1)):
        raise ValueError("h_list must be strictly decreasing")
    for h in hs:
        ratio = h / h_ref
        k = round(math.log2(ratio)) if ratio > 0 else -1
        if k < 0 or 2.0**k != ratio:
            raise ValueError(
                "h = %g is not a power-of-two multiple of h_ref = %g" % (h, h_ref)
            )
        n = T / h
        if round(n) != n or n < 1:
            raise ValueError("h = %g does not divide T = %g" % (h, T))
    return hs


def _strong_worker(args):
    model, scheme, hs, h_ref, T, key, cfgs = args
    path = generate_path(key, T, h_ref, model.d)
    ref, _ = integrate_with_stats(model, "tamed_euler", path, h_ref)
    x_ref = ref[-1]
    errs = np.empty(len(hs))
    max_abs_dh = 0.0
    max_rel_dh = 0.0
    for j, h in enumerate(hs):
        try:
            traj, stats = integrate_with_stats(model, scheme, path, h, cfgs[j])
        except (NewtonDivergenceError, IntegrationError):
            return None
        errs[j] = float(np.linalg.norm(traj[-1] - x_ref))
        max_abs_dh = max(max_abs_dh, stats.max_abs_denergy)
        max_rel_dh = max(max_rel_dh, stats.max_rel_denergy)
    return errs, max_abs_dh, max_rel_dh


def _bootstrap_ci(hs, sq_errors: np.ndarray, n_boot: int, seed: int):
    """Percentile intervals for the per-h RMS errors and the fitted slope."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    n, nh = sq_errors.shape
    log_h = np.log(np.asarray(hs))
    rms_reps = np.empty((n_boot, nh))
    slope_reps = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        rms = np.sqrt(np.mean(sq_errors[idx], axis=0))
        rms_reps[b] = rms
        if np.all(rms > 0) and nh >= 2:
            slope_reps[b] = np.polyfit(log_h, np.log(rms), 1)[0]
        else:
            slope_reps[b] = np.nan
    error_ci = tuple(
        (float(np.quantile(rms_reps[:, j], 0.025)), float(np.quantile(rms_reps[:, j], 0.975)))
        for j in range(nh)
    )
    if np.all(np.isfinite(slope_reps)):
        slope_ci = (float(np.quantile(slope_reps, 0.025)), float(np.quantile(slope_reps, 0.975)))
    else:
        slope_ci = (math.nan, math.nan)
    return error_ci, slope_ci


def fit_slope(h_values, errors, per_sample=None, n_boot: int = _BOOTSTRAP_REPS):
    """Least-squares slope of log error against log step size.

    Returns (slope, intercept, ci); the 95% interval comes from resampling
    rows of per_sample (per-sample terminal errors, one column per h) and is
    (nan, nan) when per_sample is omitted.
    """
    h = np.asarray(h_values, dtype=float)
    e = np.asarray(errors, dtype=float)
    if h.size < 2 or e.size != h.size:
        raise ValueError("need at least two (h, error) points")
    if not np.all(np.isfinite(e)) or np.any(e <= 0):
        raise ValueError("errors must be finite and positive")
    slope, intercept = np.polyfit(np.log(h), np.log(e), 1)
    ci = (math.nan, math.nan)
    if per_sample is not None:
        ps = np.asarray(per_sample, dtype=float)
        if ps.ndim != 2 or ps.shape[1] != h.size:
            raise ValueError("per_sample must have one column per h")
        _, ci = _bootstrap_ci(tuple(h), np.square(ps), n_boot, _BOOTSTRAP_SEED)
    return float(slope), float(intercept), ci


def strong_error(
    model: LangevinModel,
    h_list,
    h_ref: float,
    M: int,
    seed: int,
    scheme: str = "avf_split",
    T: float = 1.0,
    threads: int | None = None,
    newton_tol: float = 1e-12,
    quadrature_nodes: int | None = None,
) -> ConvergenceResult:
    """RMS terminal error of `scheme` at each h against tamed Euler at h_ref.

    Every sample couples all runs through one shared fine-step path.  Samples
    whose Newton solve aborts are counted and excluded from every column; the
    run aborts if more than 1% fail.  For the split scheme the per-step energy
    defect is audited inline: |dH| must stay within 10 newton_tol (1 + |H|)
    on every step of every sample.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    hs = _check_ladder(h_list, h_ref, T)
    if scheme == "avf_split":
        cfgs = tuple(
            make_avf_config(model, h, newton_tol=newton_tol, quadrature_nodes=quadrature_nodes)
            for h in hs
        )
    else:
        cfgs = (None,) * len(hs)
    items = [
        (model, scheme, hs, h_ref, T, sample_key(seed, i), cfgs) for i in range(M)
    ]
    results = _map_ordered(_strong_worker, items, threads)

    rows = [r for r in results if r is not None]
    failed = M - len(rows)
    if failed > 0.01 * M:
        raise ExperimentError(
            "Newton solve failed on %d of %d samples (> 1%%)" % (failed, M)
        )
    if not rows:
        raise ExperimentError("no samples survived")

    err_matrix = np.stack([r[0] for r in rows])
    max_abs_dh = max(r[1] for r in rows)
    max_rel_dh = max(r[2] for r in rows)
    if scheme == "avf_split" and max_rel_dh > 10.0 * newton_tol:
        raise ExperimentError(
            "energy audit failed: max |dH|/(1+|H|) = %.3e exceeds %.3e"
            % (max_rel_dh, 10.0 * newton_tol)
        )

    rms = np.sqrt(np.mean(np.square(err_matrix), axis=0))
    if len(hs) >= 2 and np.all(rms > 0):
        slope, _, _ = fit_slope(hs, rms)
        error_ci, slope_ci = _bootstrap_ci(
            hs, np.square(err_matrix), _BOOTSTRAP_REPS, _BOOTSTRAP_SEED
        )
    else:
        slope = math.nan
        slope_ci = (math.nan, math.nan)
        error_ci, _ = _bootstrap_ci(
            hs, np.square(err_matrix), _BOOTSTRAP_REPS, _BOOTSTRAP_SEED
        )
    return ConvergenceResult(
        h_values=hs,
        rms_errors=tuple(float(x) for x in rms),
        sample_count=len(rows),
        fitted_slope=slope,
        slope_ci=slope_ci,
        error_ci=error_ci,
        failed_samples=failed,
        max_abs_denergy=max_abs_dh,
    )


def energy_audit(model: LangevinModel, path: PathHierarchy, h: float) -> float:
    """Largest |H(x_bar_{n+1}) - H(x_n)| along one split-scheme trajectory."""
    _, stats = integrate_with_stats(model, "avf_split", path, h)
    return stats.max_abs_denergy


def _moment_worker(args):
    model, h, h_ref, T, key, beta, cfg = args
    path = generate_path(key, T, h_ref, model.d)
    traj, _ = integrate_with_stats(model, "avf_split", path, h, cfg)
    m = model.m
    p, q = traj[:, :m], traj[:, m:]
    u = (
        0.5 * np.sum(p * p, axis=1)
        + potential_values(model.potential, q)
        + model.potential.lower_offset
    )
    times = h * np.arange(traj.shape[0])
    return u * np.exp(-beta * times)


def exp_moment_monitor(
    model: LangevinModel,
    h: float,
    M: int,
    beta: float,
    seed: int = 0,
    T: float = 1.0,
    threads: int | None = None,
) -> MonitorSeries:
    """Monte Carlo estimate of E[exp(U(X_n) / e^{beta t_n})] on the h-grid.

    U is the Hamiltonian shifted by the model's lower offset.  Accumulation
    runs in log space, so only samples whose exponent itself overflows a
    double are excluded (reported in overflow_count).  The bound field is the
    analytic cap exp(sum_k |sigma_k|^2 / (2 beta)) exp(U(X_0)).
    """
    if M < 1:
        raise ValueError("M must be positive")
    beta_floor = max(model.sigma_frobenius_sq - 2.0 * model.v, 0.0)
    if not beta > 0 or beta < beta_floor:
        raise ValueError(
            "beta = %g inadmissible; need beta >= max(sum|sigma_k|^2 - 2v, 0) = %g and beta > 0"
            % (beta, beta_floor)
        )
    h_ref = h / 16.0
    cfg = make_avf_config(model, h)
    items = [(model, h, h_ref, T, sample_key(seed, i), beta, cfg) for i in range(M)]
    rows = _map_ordered(_moment_worker, items, threads)
    z = np.stack(rows)

    keep = np.max(z, axis=1) <= _LOG_MAX
    overflow = int(np.sum(~keep))
    if not np.any(keep):
        raise ExperimentError("every sample overflowed the exponential moment")
    z = z[keep]
    z_max = np.max(z, axis=0)
    estimates = np.exp(
        z_max + np.log(np.sum(np.exp(z - z_max), axis=0)) - math.log(z.shape[0])
    )

    u0 = hamiltonian(model, model.x0)
    bound = math.exp(model.sigma_frobenius_sq / (2.0 * beta)) * math.exp(u0)
    times = h * np.arange(len(estimates))
    return MonitorSeries(
        times=tuple(float(t) for t in times),
        values=tuple(float(x) for x in estimates),
        bound=bound,
        overflow_count=overflow,
        sample_count=int(z.shape[0]),
    )
