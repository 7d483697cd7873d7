"""Hierarchical Wiener increments and the friction-weighted convolution.

One sample owns a fine-grid increment table; every coarse step size reads
windows of that table, so a coarse scheme and the fine reference run are
driven by the same noise.  The convolution integral of the exact
friction/noise substep is approximated by a right-endpoint weighted sum over
the fine increments (bias O(h_ref)), which keeps the coupling intact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PathHierarchy",
    "OUIncrement",
    "generate_path",
    "coarse_increment",
    "ou_variance_factor",
    "sample_key",
]


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class PathHierarchy:
    """Fine Wiener increments for one Monte Carlo sample."""

    T: float
    h_ref: float
    fine_increments: np.ndarray  # (N_ref, d), N(0, h_ref) entries
    seed: int

    def __post_init__(self):
        object.__setattr__(
            self, "fine_increments",
            _freeze(np.asarray(self.fine_increments, dtype=float)),
        )

    @property
    def n_fine(self) -> int:
        return self.fine_increments.shape[0]

    @property
    def d(self) -> int:
        return self.fine_increments.shape[1]

    def with_bumped_increment(self, j: int, k: int, eps: float) -> "PathHierarchy":
        inc = self.fine_increments.copy()
        inc[j, k] += eps
        return PathHierarchy(self.T, self.h_ref, inc, self.seed)


@dataclass(frozen=True)
class OUIncrement:
    """Plain increment and its friction-weighted counterpart over one step."""

    plain: np.ndarray
    convolved: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "plain", _freeze(np.asarray(self.plain, dtype=float).reshape(-1)))
        object.__setattr__(self, "convolved", _freeze(np.asarray(self.convolved, dtype=float).reshape(-1)))


def sample_key(global_seed: int, sample_index: int) -> int:
    """128-bit counter-RNG key: two 64-bit words (global seed, sample index)."""
    if not 0 <= global_seed < 2**64:
        raise ValueError("global seed must fit in 64 bits")
    if not 0 <= sample_index < 2**64:
        raise ValueError("sample index must fit in 64 bits")
    return (global_seed << 64) | sample_index


def generate_path(seed: int, T: float, h_ref: float, d: int) -> PathHierarchy:
    """Deterministic fine-increment table keyed by a counter-based RNG seed."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if not (T > 0 and h_ref > 0):
        raise ValueError("T and h_ref must be positive")
    n = T / h_ref
    n_round = int(round(n))
    if n_round < 1 or abs(n - n_round) > 1e-9:
        raise ValueError("T/h_ref = %r is not a positive integer" % n)
    gen = np.random.Generator(np.random.Philox(key=int(seed)))
    inc = gen.standard_normal((n_round, d)) * np.sqrt(h_ref)
    return PathHierarchy(T=float(T), h_ref=float(h_ref), fine_increments=inc, seed=int(seed))


def steps_per_coarse(path: PathHierarchy, h: float) -> int:
    r = h / path.h_ref
    r_round = int(round(r))
    if r_round < 1 or abs(r - r_round) > 1e-9:
        raise ValueError("h = %r is not a positive multiple of h_ref = %r" % (h, path.h_ref))
    return r_round


def convolution_weights(v: float, h_ref: float, r: int) -> np.ndarray:
    """Right-endpoint weights exp(-v (t_{n+1} - s_{j+1})) per fine subinterval."""
    # local fine index j = 0..r-1; distance to the coarse endpoint is
    # (r-1-j) * h_ref after evaluating at the right endpoint s_{j+1}
    return np.exp(-v * h_ref * np.arange(r - 1, -1, -1, dtype=float))


def coarse_increment(path: PathHierarchy, n: int, h: float, v: float) -> OUIncrement:
    """Window [t_n, t_n + h]: plain sum and the friction-weighted sum."""
    r = steps_per_coarse(path, h)
    j0 = n * r
    if n < 0 or j0 + r > path.n_fine:
        raise ValueError("window [%d, %d) outside the path" % (j0, j0 + r))
    window = path.fine_increments[j0:j0 + r]
    plain = window.sum(axis=0)
    conv = convolution_weights(v, path.h_ref, r) @ window
    return OUIncrement(plain=plain, convolved=conv)


def all_coarse_increments(path: PathHierarchy, h: float, v: float):
    """(plain, convolved) arrays of shape (N_coarse, d), vectorized."""
    r = steps_per_coarse(path, h)
    n_coarse = path.n_fine // r
    if n_coarse * r != path.n_fine:
        raise ValueError("path length is not a multiple of the coarse step")
    blocks = path.fine_increments.reshape(n_coarse, r, path.d)
    plain = blocks.sum(axis=1)
    conv = np.tensordot(blocks, convolution_weights(v, path.h_ref, r), axes=([1], [0]))
    return plain, conv


def ou_variance_factor(v: float, h: float) -> float:
    """Variance multiplier (1 - exp(-2vh)) / (2v) of the exact convolution.

    Uses expm1 so the h -> 0 and v -> 0 limits stay accurate; at v = 0 the
    analytic limit h is returned.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if v < 0:
        raise ValueError("v must be nonnegative")
    if v == 0:
        return float(h)
    return float(-np.expm1(-2.0 * v * h) / (2.0 * v))
