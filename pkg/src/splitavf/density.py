"""Mollified density estimation on a grid and convergence-in-density runs.

The estimator is the plain Gaussian-kernel average (1/M) sum_i phi_rho(x_i - y)
in the full phase-space dimension 2m.  The convergence experiment compares
terminal-state densities of the split scheme against the coupled tamed-Euler
reference under the grid sup distance, with bandwidth tied to the step size.
The sup distance is a practical surrogate for a negative-order-norm statement
and is labeled as such everywhere it is reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .experiments import (
    _BOOTSTRAP_REPS,
    _BOOTSTRAP_SEED,
    ExperimentError,
    _check_ladder,
    _map_ordered,
    fit_slope,
)
from .integrators import (
    IntegrationError,
    NewtonDivergenceError,
    integrate_with_stats,
    make_avf_config,
)
from .model import LangevinModel
from .noise import generate_path, sample_key

__all__ = [
    "DensityGrid",
    "DensityConvergenceResult",
    "build_grid",
    "kde",
    "grid_mass",
    "density_distance",
    "density_convergence",
    "monotone_report",
]

_NODES_2D = 128
_NODES_DEFAULT = 48


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class DensityGrid:
    """A kernel density estimate sampled on a uniform rectangular grid.

    values[i1, ..., id] is the estimate at (axes[0][i1], ..., axes[-1][id]).
    Grid mass (Riemann sum times cell volume) is close to one only when the
    node spacing resolves the bandwidth; grid_mass() reports it.
    """

    dim: int
    axes: tuple[np.ndarray, ...]
    values: np.ndarray
    bandwidth: float

    def __post_init__(self):
        if self.dim != len(self.axes):
            raise ValueError("need one axis per dimension")
        axes = tuple(_freeze(np.asarray(a, dtype=float).reshape(-1)) for a in self.axes)
        object.__setattr__(self, "axes", axes)
        values = np.asarray(self.values, dtype=float)
        if values.shape != tuple(len(a) for a in axes):
            raise ValueError("values shape does not match the axes")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("density values must be finite and nonnegative")
        object.__setattr__(self, "values", _freeze(values))
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


def grid_mass(grid: DensityGrid) -> float:
    """Riemann sum of the values times the cell volume."""
    cell = 1.0
    for a in grid.axes:
        if len(a) < 2:
            raise ValueError("axes need at least two nodes for a cell volume")
        cell *= (a[-1] - a[0]) / (len(a) - 1)
    return float(np.sum(grid.values) * cell)


def build_grid(samples, rho: float, nodes_per_axis: int | None = None) -> tuple[np.ndarray, ...]:
    """Uniform axes covering the central sample mass, padded by 3 rho.

    Ranges run from the 0.1% to the 99.9% sample quantile per coordinate,
    extended by three bandwidths on both sides.
    """
    pts = np.atleast_2d(np.asarray(samples, dtype=float))
    if pts.shape[0] < 1:
        raise ValueError("empty sample set")
    if not rho > 0:
        raise ValueError("bandwidth must be positive")
    dim = pts.shape[1]
    if nodes_per_axis is None:
        nodes_per_axis = _NODES_2D if dim <= 2 else _NODES_DEFAULT
    lo = np.quantile(pts, 0.001, axis=0) - 3.0 * rho
    hi = np.quantile(pts, 0.999, axis=0) + 3.0 * rho
    return tuple(
        _freeze(np.linspace(lo[a], hi[a], nodes_per_axis)) for a in range(dim)
    )


def _axes_of(grid) -> tuple[np.ndarray, ...]:
    if isinstance(grid, DensityGrid):
        return grid.axes
    return tuple(np.asarray(a, dtype=float).reshape(-1) for a in grid)


def kde(samples, grid, rho: float) -> DensityGrid:
    """Gaussian-kernel density of the samples on the grid nodes.

    The kernel factorizes over coordinates, so each sample adds an outer
    product of one-dimensional Gaussian profiles, truncated at 6 rho (a
    relative tail below 2e-8; truncation only loses mass, never adds).
    """
    axes = _axes_of(grid)
    pts = np.atleast_2d(np.asarray(samples, dtype=float))
    n, dim = pts.shape
    if n == 0:
        raise ValueError("empty sample set")
    if dim != len(axes):
        raise ValueError("samples have %d coordinates, grid has %d axes" % (dim, len(axes)))
    if not rho > 0:
        raise ValueError("bandwidth must be positive")

    cut = 6.0 * rho
    norm_1d = 1.0 / (math.sqrt(2.0 * math.pi) * rho)
    inv_two_rho_sq = 1.0 / (2.0 * rho * rho)
    values = np.zeros(tuple(len(a) for a in axes))
    for x in pts:
        windows = []
        factors = []
        inside = True
        for a, xa in zip(axes, x):
            lo = int(np.searchsorted(a, xa - cut, side="left"))
            hi = int(np.searchsorted(a, xa + cut, side="right"))
            if hi <= lo:
                inside = False
                break
            da = a[lo:hi] - xa
            windows.append(slice(lo, hi))
            factors.append(norm_1d * np.exp(-da * da * inv_two_rho_sq))
        if not inside:
            continue
        block = factors[0]
        for f in factors[1:]:
            block = np.multiply.outer(block, f)
        values[tuple(windows)] += block
    values /= n
    return DensityGrid(dim=dim, axes=axes, values=values, bandwidth=float(rho))


def density_distance(g1: DensityGrid, g2: DensityGrid) -> float:
    """Sup over grid nodes of the absolute difference of two estimates."""
    if g1.dim != g2.dim or g1.bandwidth != g2.bandwidth:
        raise ValueError("grid mismatch: dimensions and bandwidths must agree")
    for a, b in zip(g1.axes, g2.axes):
        if a.shape != b.shape or not np.array_equal(a, b):
            raise ValueError("grid mismatch: axes differ")
    return float(np.max(np.abs(g1.values - g2.values)))


@dataclass(frozen=True)
class DensityConvergenceResult:
    """Per-step KDE sup distances against the coupled reference density.

    distance_ci pins a bootstrap interval for the difference at the node
    where the sup is attained (the sup location is treated as fixed when
    resampling).  grids holds the (scheme, reference) estimate pair per h.
    """

    h_values: tuple[float, ...]
    bandwidths: tuple[float, ...]
    distances: tuple[float, ...]
    distance_ci: tuple[tuple[float, float], ...]
    fitted_slope: float
    slope_ci: tuple[float, float]
    sample_count: int
    failed_samples: int
    grids: tuple[tuple[DensityGrid, DensityGrid], ...]


def _terminal_worker(args):
    model, hs, h_ref, T, key, cfgs = args
    path = generate_path(key, T, h_ref, model.d)
    ref, _ = integrate_with_stats(model, "tamed_euler", path, h_ref)
    outs = np.empty((len(hs), 2 * model.m))
    for j, h in enumerate(hs):
        try:
            traj, _ = integrate_with_stats(model, "avf_split", path, h, cfgs[j])
        except (NewtonDivergenceError, IntegrationError):
            return None
        outs[j] = traj[-1]
    return ref[-1], outs


def _phi_iso(diff: np.ndarray, rho: float) -> np.ndarray:
    # isotropic Gaussian kernel over the last axis of diff
    d = diff.shape[-1]
    norm = (2.0 * math.pi * rho * rho) ** (-0.5 * d)
    return norm * np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * rho * rho))


def density_convergence(
    model: LangevinModel,
    h_list,
    h_ref: float,
    M: int,
    rho_rule=None,
    seed: int = 0,
    T: float = 1.0,
    threads: int | None = None,
    nodes_per_axis: int | None = None,
) -> DensityConvergenceResult:
    """KDE sup distance between scheme and reference terminal laws, per h.

    Shares one Wiener path per sample across all step sizes; the reference
    terminal ensemble (tamed Euler at h_ref) also fixes the grid per h.  The
    bandwidth is rho_rule(h) for a callable rule, c*h for a numeric rule,
    and h when the rule is omitted.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    hs = _check_ladder(h_list, h_ref, T)
    if rho_rule is None:
        rho_of = lambda h: h
    elif callable(rho_rule):
        rho_of = rho_rule
    else:
        c = float(rho_rule)
        if not c > 0:
            raise ValueError("bandwidth multiplier must be positive")
        rho_of = lambda h: c * h
    cfgs = tuple(make_avf_config(model, h) for h in hs)
    items = [(model, hs, h_ref, T, sample_key(seed, i), cfgs) for i in range(M)]
    results = _map_ordered(_terminal_worker, items, threads)

    rows = [r for r in results if r is not None]
    failed = M - len(rows)
    if failed > 0.01 * M:
        raise ExperimentError(
            "Newton solve failed on %d of %d samples (> 1%%)" % (failed, M)
        )
    if not rows:
        raise ExperimentError("no samples survived")
    ref_pts = np.stack([r[0] for r in rows])
    avf_pts = np.stack([r[1] for r in rows])  # (n, H, 2m)
    n = ref_pts.shape[0]

    rng = np.random.Generator(np.random.Philox(key=_BOOTSTRAP_SEED))
    boot_idx = rng.integers(0, n, size=(_BOOTSTRAP_REPS, n))

    distances = []
    bandwidths = []
    cis = []
    grids = []
    node_diffs = np.empty((len(hs), n))
    for j, h in enumerate(hs):
        rho = float(rho_of(h))
        if not rho > 0:
            raise ValueError("bandwidth rule produced a nonpositive value")
        axes = build_grid(ref_pts, rho, nodes_per_axis)
        g_ref = kde(ref_pts, axes, rho)
        g_avf = kde(avf_pts[:, j, :], axes, rho)
        dist = density_distance(g_avf, g_ref)
        flat = int(np.argmax(np.abs(g_avf.values - g_ref.values)))
        node = np.unravel_index(flat, g_ref.values.shape)
        y_star = np.array([a[i] for a, i in zip(g_ref.axes, node)])
        diffs = _phi_iso(avf_pts[:, j, :] - y_star, rho) - _phi_iso(ref_pts - y_star, rho)
        node_diffs[j] = diffs
        reps = np.abs(np.mean(diffs[boot_idx], axis=1))
        cis.append((float(np.quantile(reps, 0.025)), float(np.quantile(reps, 0.975))))
        distances.append(dist)
        bandwidths.append(rho)
        grids.append((g_avf, g_ref))

    if len(hs) >= 2 and all(d > 0 for d in distances):
        slope, _, _ = fit_slope(hs, distances)
        log_h = np.log(np.asarray(hs))
        slope_reps = np.empty(_BOOTSTRAP_REPS)
        for b in range(_BOOTSTRAP_REPS):
            reps = np.abs(np.mean(node_diffs[:, boot_idx[b]], axis=1))
            if np.all(reps > 0):
                slope_reps[b] = np.polyfit(log_h, np.log(reps), 1)[0]
            else:
                slope_reps[b] = np.nan
        if np.all(np.isfinite(slope_reps)):
            slope_ci = (
                float(np.quantile(slope_reps, 0.025)),
                float(np.quantile(slope_reps, 0.975)),
            )
        else:
            slope_ci = (math.nan, math.nan)
    else:
        slope = math.nan
        slope_ci = (math.nan, math.nan)

    return DensityConvergenceResult(
        h_values=hs,
        bandwidths=tuple(bandwidths),
        distances=tuple(distances),
        distance_ci=tuple(cis),
        fitted_slope=slope,
        slope_ci=slope_ci,
        sample_count=n,
        failed_samples=failed,
        grids=tuple(grids),
    )


def monotone_report(distances, cis) -> dict:
    """Decrease check across the ladder, allowing one interval-covered inversion.

    An adjacent pair inverts when the later (smaller-h) distance is not
    strictly smaller; the inversion is covered when the two intervals overlap.
    """
    d = list(distances)
    inversions = 0
    covered = 0
    for i in range(len(d) - 1):
        if d[i + 1] < d[i]:
            continue
        inversions += 1
        lo_a, hi_a = cis[i]
        lo_b, hi_b = cis[i + 1]
        if max(lo_a, lo_b) <= min(hi_a, hi_b):
            covered += 1
    ok = inversions == 0 or (inversions == 1 and covered == 1)
    return {
        "strictly_decreasing": inversions == 0,
        "inversions": inversions,
        "ci_covered_inversions": covered,
        "monotone_ok": ok,
    }
