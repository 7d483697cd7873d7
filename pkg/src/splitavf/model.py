"""Polynomial potentials and the underdamped Langevin system.

The dynamics is the pair of SDEs

    dP = -grad F(Q) dt - v P dt + sigma dW_t
    dQ = P dt

with a scalar potential F bounded below.  Potentials are stored as sparse
multi-index coefficient tables so that quadrature degrees and derivative
tables stay exact; arbitrary callables are accepted as an escape hatch but
lose the exactness guarantees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "PotentialSpec",
    "LangevinModel",
    "State",
    "builtin_potential",
    "hamiltonian",
    "validate_assumptions",
]

# Grid used for the numeric lower-bound scans (Hessian eigenvalue and min F).
_SCAN_RANGE = 5.0
_SCAN_NODES = {1: 641, 2: 161, 3: 41}


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a)
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# Sparse polynomial tables


def _terms_arrays(terms: Sequence[tuple[float, Sequence[int]]], m: int):
    if len(terms) == 0:
        return np.zeros(0), np.zeros((0, m), dtype=np.int64)
    coeffs = np.array([float(c) for c, _ in terms])
    expon = np.array([[int(e) for e in es] for _, es in terms], dtype=np.int64)
    if expon.shape[1] != m:
        raise ValueError("exponent tuples must have length m=%d" % m)
    if np.any(expon < 0):
        raise ValueError("negative exponents are not polynomial")
    return coeffs, expon


def _poly_diff(coeffs: np.ndarray, expon: np.ndarray, axis: int):
    mask = expon[:, axis] > 0
    c = coeffs[mask] * expon[mask, axis]
    e = expon[mask].copy()
    e[:, axis] -= 1
    return c, e


def _poly_eval(coeffs: np.ndarray, expon: np.ndarray, y: np.ndarray) -> float:
    if coeffs.size == 0:
        return 0.0
    return float(np.dot(coeffs, np.prod(y[None, :] ** expon, axis=1)))


def _poly_eval_batch(coeffs: np.ndarray, expon: np.ndarray, pts: np.ndarray) -> np.ndarray:
    # pts shape (..., m) -> values shape (...)
    if coeffs.size == 0:
        return np.zeros(pts.shape[:-1])
    return np.prod(pts[..., None, :] ** expon, axis=-1) @ coeffs


def _value_fn(coeffs, expon, y):
    return _poly_eval(coeffs, expon, np.asarray(y, dtype=float).reshape(-1))


def _grad_fn(packs, m, y):
    y = np.asarray(y, dtype=float).reshape(-1)
    return np.array([_poly_eval(c, e, y) for c, e in packs])


def _hess_fn(packs, m, y):
    y = np.asarray(y, dtype=float).reshape(-1)
    out = np.empty((m, m))
    k = 0
    for i in range(m):
        for j in range(i, m):
            out[i, j] = out[j, i] = _poly_eval(packs[k][0], packs[k][1], y)
            k += 1
    return out


@dataclass(frozen=True)
class PotentialSpec:
    """A potential F with derivative callables and structural metadata.

    hessian_lower_bound is a constant K >= 0 with lambda_min(hessian(y)) >= -K
    for all y; exponent_vector lists the per-coordinate growth orders l_i
    (leading degree 2*l_i); polynomial_degree is the total degree used to pick
    exact quadrature; lower_offset C0 keeps F(y) + C0 > 0 for energy monitors.
    """

    dimension: int
    evaluate: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    hessian_lower_bound: float
    exponent_vector: tuple[int, ...]
    polynomial_degree: int | None
    lower_offset: float = 0.0
    terms: tuple[tuple[float, tuple[int, ...]], ...] | None = None
    name: str = "custom"
    grad_terms: tuple = field(default=None, repr=False, compare=False)
    hess_terms: tuple = field(default=None, repr=False, compare=False)

    @property
    def is_polynomial(self) -> bool:
        return self.terms is not None


def _scan_points(m: int) -> np.ndarray:
    if m not in _SCAN_NODES:
        raise ValueError("numeric lower-bound scan supports m <= 3 only")
    axis = np.linspace(-_SCAN_RANGE, _SCAN_RANGE, _SCAN_NODES[m])
    grids = np.meshgrid(*([axis] * m), indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=-1)


def _grid_min_value(coeffs, expon, m: int) -> float:
    return float(np.min(_poly_eval_batch(coeffs, expon, _scan_points(m))))


def _grid_min_hessian_eig(hess_packs, m: int) -> float:
    pts = _scan_points(m)
    vals = np.empty((pts.shape[0], m, m))
    k = 0
    for i in range(m):
        for j in range(i, m):
            v = _poly_eval_batch(hess_packs[k][0], hess_packs[k][1], pts)
            vals[:, i, j] = v
            vals[:, j, i] = v
            k += 1
    return float(np.min(np.linalg.eigvalsh(vals)))


def _build_poly_spec(
    name: str,
    terms: Sequence[tuple[float, Sequence[int]]],
    m: int,
    hessian_lower_bound: float | None,
    lower_offset: float | None,
) -> PotentialSpec:
    coeffs, expon = _terms_arrays(terms, m)
    if coeffs.size == 0:
        raise ValueError("potential needs at least one term")

    # Bounded-below gate: every coordinate must carry an even leading degree.
    lead = expon.max(axis=0) if expon.size else np.zeros(m, dtype=np.int64)
    for i in range(m):
        if lead[i] == 0 or lead[i] % 2 == 1:
            raise ValueError(
                "coordinate %d has leading degree %d; an even degree >= 2 is "
                "required for a potential bounded below" % (i, int(lead[i]))
            )
    exponent_vector = tuple(int(e) // 2 for e in lead)
    degree = int(expon.sum(axis=1).max())

    grad_packs = tuple(_poly_diff(coeffs, expon, i) for i in range(m))
    hess_packs = []
    for i in range(m):
        for j in range(i, m):
            hess_packs.append(_poly_diff(grad_packs[i][0], grad_packs[i][1], j))
    hess_packs = tuple(hess_packs)

    if hessian_lower_bound is None:
        min_eig = _grid_min_hessian_eig(hess_packs, m)
        hessian_lower_bound = float(max(0.0, math.ceil(-min_eig)))
    if lower_offset is None:
        lower_offset = 1.0 + max(0.0, -_grid_min_value(coeffs, expon, m))

    return PotentialSpec(
        dimension=m,
        evaluate=partial(_value_fn, coeffs, expon),
        gradient=partial(_grad_fn, grad_packs, m),
        hessian=partial(_hess_fn, hess_packs, m),
        hessian_lower_bound=float(hessian_lower_bound),
        exponent_vector=exponent_vector,
        polynomial_degree=degree,
        lower_offset=float(lower_offset),
        terms=tuple((float(c), tuple(int(e) for e in es)) for c, es in terms),
        name=name,
        grad_terms=grad_packs,
        hess_terms=hess_packs,
    )


def builtin_potential(
    name: str,
    m: int = 1,
    coeffs: Iterable[tuple[float, Sequence[int]]] | None = None,
    hessian_lower_bound: float | None = None,
    lower_offset: float | None = None,
) -> PotentialSpec:
    """Construct a potential by name.

    Names: ``quartic1d`` (F = q^4), ``coupled2d`` (F = q1^8 + q2^2 + 2 q1 q2),
    ``harmonic`` (F = |y|^2 / 2 in dimension m), ``custom_poly`` (sparse
    multi-index terms [(coeff, exponents)]).
    """
    if name == "quartic1d":
        # 12 q^2 >= 0 everywhere, so K = 0 exactly.
        return _build_poly_spec(
            name, [(1.0, (4,))], 1,
            0.0 if hessian_lower_bound is None else hessian_lower_bound,
            lower_offset if lower_offset is not None else 1.0,
        )
    if name == "coupled2d":
        # Hessian [[56 q1^6, 2], [2, 2]]: at q1 = 0 the eigenvalues are
        # 1 +- sqrt(5), so the global lower bound rounds up to K = 2.
        return _build_poly_spec(
            name,
            [(1.0, (8, 0)), (1.0, (0, 2)), (2.0, (1, 1))],
            2,
            2.0 if hessian_lower_bound is None else hessian_lower_bound,
            lower_offset,
        )
    if name == "harmonic":
        terms = [(0.5, tuple(2 if j == i else 0 for j in range(m))) for i in range(m)]
        return _build_poly_spec(
            name, terms, m,
            0.0 if hessian_lower_bound is None else hessian_lower_bound,
            lower_offset if lower_offset is not None else 1.0,
        )
    if name == "custom_poly":
        if coeffs is None:
            raise ValueError("custom_poly requires coeffs=[(coeff, exponents), ...]")
        terms = list(coeffs)
        if not terms:
            raise ValueError("custom_poly requires at least one term")
        m_inferred = len(tuple(terms[0][1]))
        return _build_poly_spec("custom_poly", terms, m_inferred,
                                hessian_lower_bound, lower_offset)
    raise ValueError("unknown potential name %r" % name)


# ---------------------------------------------------------------------------
# State and model


@dataclass(frozen=True)
class State:
    """Momentum/position pair; the system state is x = (p^T, q^T)^T."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _freeze(np.asarray(self.p, dtype=float).reshape(-1)))
        object.__setattr__(self, "q", _freeze(np.asarray(self.q, dtype=float).reshape(-1)))
        if self.p.shape != self.q.shape:
            raise ValueError("p and q must have the same dimension")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q])

    @classmethod
    def from_vector(cls, x: np.ndarray, m: int) -> "State":
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != 2 * m:
            raise ValueError("state vector must have length 2m")
        return cls(x[:m], x[m:])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.p).all() and np.isfinite(self.q).all())


@dataclass(frozen=True)
class LangevinModel:
    """Dimensions, friction, diffusion matrix, potential, and initial state."""

    m: int
    d: int
    v: float
    sigma: np.ndarray
    potential: PotentialSpec
    x0: State

    def __post_init__(self):
        if self.m < 1 or self.d < 1:
            raise ValueError("m and d must be positive")
        if not self.v > 0:
            raise ValueError("friction v must be > 0")
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.size == 1 and self.m == 1 and self.d == 1:
            sigma = sigma.reshape(1, 1)
        if sigma.shape != (self.m, self.d):
            raise ValueError("sigma must have shape (m, d)")
        object.__setattr__(self, "sigma", _freeze(sigma))
        if self.potential.dimension != self.m:
            raise ValueError("potential dimension does not match m")
        if self.x0.p.size != self.m:
            raise ValueError("x0 dimension does not match m")

    @property
    def sigma_sq(self) -> np.ndarray:
        return self.sigma @ self.sigma.T

    @property
    def sigma_frobenius_sq(self) -> float:
        # sum_k |sigma_k|^2 over noise columns
        return float(np.sum(self.sigma * self.sigma))


def hamiltonian(model: LangevinModel, x: State) -> float:
    """U(x) = |p|^2/2 + F(q) + C0 with C0 = potential.lower_offset."""
    return float(
        0.5 * np.dot(x.p, x.p)
        + model.potential.evaluate(x.q)
        + model.potential.lower_offset
    )


def potential_values(potential: PotentialSpec, points: np.ndarray) -> np.ndarray:
    """F evaluated at each row of points, vectorized for stored polynomials."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != potential.dimension:
        raise ValueError("points must have %d columns" % potential.dimension)
    if potential.terms is not None:
        coeffs, expon = _terms_arrays(potential.terms, potential.dimension)
        return _poly_eval_batch(coeffs, expon, pts)
    return np.array([float(potential.evaluate(row)) for row in pts])


def validate_assumptions(model: LangevinModel) -> dict:
    """Report-only structural checks on the model.

    Checks: rank(sigma sigma^T) = m, the Hessian lower bound is a finite
    nonnegative constant, the stored polynomial is bounded below (even leading
    degree with positive pure leading coefficient per coordinate), and every
    growth order l_i >= 1.
    """
    checks = []

    rank = int(np.linalg.matrix_rank(model.sigma_sq))
    checks.append({
        "name": "noise_rank",
        "passed": rank == model.m,
        "detail": "rank(sigma sigma^T) = %d, m = %d" % (rank, model.m),
    })

    K = model.potential.hessian_lower_bound
    checks.append({
        "name": "hessian_lower_bound",
        "passed": bool(np.isfinite(K)) and K >= 0,
        "detail": "K = %r" % K,
    })

    pot = model.potential
    if pot.terms is not None:
        coeffs, expon = _terms_arrays(pot.terms, pot.dimension)
        ok = True
        details = []
        lead = expon.max(axis=0)
        for i in range(pot.dimension):
            li = int(lead[i])
            pure = [
                c for c, es in zip(coeffs, expon)
                if es[i] == li and sum(es) == li
            ]
            lead_coeff = sum(pure)
            if li % 2 == 1 or li == 0 or lead_coeff <= 0:
                ok = False
            details.append("coord %d: degree %d, pure leading coeff %g" % (i, li, lead_coeff))
        checks.append({
            "name": "bounded_below",
            "passed": ok,
            "detail": "; ".join(details),
        })
    else:
        checks.append({
            "name": "bounded_below",
            "passed": True,
            "detail": "skipped: no coefficient table (callback potential)",
        })

    checks.append({
        "name": "growth_orders",
        "passed": all(l >= 1 for l in pot.exponent_vector),
        "detail": "l = %s" % (pot.exponent_vector,),
    })

    return {"checks": checks, "all_pass": all(c["passed"] for c in checks)}
