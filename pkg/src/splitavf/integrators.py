"""Splitting scheme (implicit energy-preserving substep + exact friction/noise
substep), the drift-tamed explicit reference scheme, and the Newton solver.

One step of the split scheme from (P_n, Q_n):

    Pbar = P_n - h * avg_grad(Q_n, Qbar)        (implicit)
    Qbar = Q_n + (h/2) (Pbar + P_n)
    P_{n+1} = e^{-vh} Pbar + sigma * convolved increment
    Q_{n+1} = Qbar

where avg_grad is the line average of grad F between the old and new
positions, evaluated by Gauss-Legendre quadrature that is exact for the
stored polynomial degree.  The implicit equation is solved for Qbar by
Newton; the solve is well posed for h < 2/sqrt(K).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .model import LangevinModel, PotentialSpec, State, hamiltonian
from .noise import OUIncrement, PathHierarchy, all_coarse_increments, steps_per_coarse

__all__ = [
    "AvfConfig",
    "StepRecord",
    "NewtonDivergenceError",
    "IntegrationError",
    "make_avf_config",
    "avf_averaged_gradient",
    "avf_hamiltonian_substep",
    "ou_substep",
    "avf_step",
    "tamed_euler_step",
    "integrate",
    "integrate_with_stats",
]

SCHEMES = ("avf_split", "tamed_euler")
_CALLBACK_QUAD_NODES = 8


class NewtonDivergenceError(RuntimeError):
    """Implicit solve failed to reach the residual tolerance."""

    def __init__(self, residual: float, iterations: int, step: int | None = None):
        self.residual = residual
        self.iterations = iterations
        self.step = step
        where = "" if step is None else " at step %d" % step
        super().__init__(
            "Newton solve%s stopped with residual %.3e after %d iterations"
            % (where, residual, iterations)
        )


class IntegrationError(RuntimeError):
    """Non-finite state encountered during integration."""


@dataclass(frozen=True)
class AvfConfig:
    """Step size and solver parameters for the split scheme."""

    h: float
    newton_tol: float = 1e-12
    newton_max_iter: int = 50
    quadrature_nodes: int = 8


def required_quadrature_nodes(potential: PotentialSpec) -> int:
    if potential.polynomial_degree is None:
        return _CALLBACK_QUAD_NODES
    return max(1, math.ceil(potential.polynomial_degree / 2))


def make_avf_config(
    model: LangevinModel,
    h: float,
    newton_tol: float = 1e-12,
    newton_max_iter: int = 50,
    quadrature_nodes: int | None = None,
) -> AvfConfig:
    """Validated solver configuration for one model.

    Enforces the solvability guard h < 2/sqrt(K) for K > 0 and a node count
    that keeps the line-average quadrature exact for the stored polynomial.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    K = model.potential.hessian_lower_bound
    if K > 0 and not h < 2.0 / math.sqrt(K):
        raise ValueError(
            "step h = %g violates the solvability guard h < 2/sqrt(K) = %g"
            % (h, 2.0 / math.sqrt(K))
        )
    n_req = required_quadrature_nodes(model.potential)
    if quadrature_nodes is None:
        quadrature_nodes = n_req
    elif quadrature_nodes < n_req:
        raise ValueError(
            "quadrature_nodes = %d is below the exactness requirement %d"
            % (quadrature_nodes, n_req)
        )
    if newton_tol <= 0 or newton_max_iter < 1:
        raise ValueError("newton_tol must be > 0 and newton_max_iter >= 1")
    return AvfConfig(
        h=float(h),
        newton_tol=float(newton_tol),
        newton_max_iter=int(newton_max_iter),
        quadrature_nodes=int(quadrature_nodes),
    )


@dataclass(frozen=True)
class StepRecord:
    """One split step: the post-implicit state, the full state, solver info."""

    x_bar: State
    x: State
    newton_iters: int
    residual: float


@lru_cache(maxsize=32)
def quad_rule(n_q: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights mapped to [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n_q)
    x01 = np.ascontiguousarray(0.5 * (x + 1.0))
    w01 = np.ascontiguousarray(0.5 * w)
    x01.flags.writeable = False
    w01.flags.writeable = False
    return x01, w01


def avf_averaged_gradient(
    potential: PotentialSpec, a: np.ndarray, b: np.ndarray, n_q: int | None = None
) -> np.ndarray:
    """Quadrature of the line average of grad F from a to b."""
    if n_q is None:
        n_q = required_quadrature_nodes(potential)
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    x, w = quad_rule(n_q)
    acc = np.zeros(potential.dimension)
    for xk, wk in zip(x, w):
        acc += wk * np.asarray(potential.gradient(a + xk * (b - a)), dtype=float)
    return acc


def _avg_hessian_tau(potential: PotentialSpec, a, b, n_q: int) -> np.ndarray:
    # integral of Hess F(a + tau (b - a)) * tau dtau; the Newton Jacobian core
    x, w = quad_rule(n_q)
    m = potential.dimension
    acc = np.zeros((m, m))
    for xk, wk in zip(x, w):
        acc += (wk * xk) * np.asarray(potential.hessian(a + xk * (b - a)), dtype=float)
    return acc


def _hamiltonian_substep_full(model: LangevinModel, x: State, cfg: AvfConfig):
    pot = model.potential
    h = cfg.h
    p, q = x.p, x.q
    target = q + h * p
    z = target.copy()
    eye = np.eye(model.m)
    iters = 0
    g = np.zeros(model.m)
    rn = np.inf
    while True:
        g = avf_averaged_gradient(pot, q, z, cfg.quadrature_nodes)
        resid = z - target + 0.5 * h * h * g
        rn = float(np.linalg.norm(resid))
        if rn <= cfg.newton_tol:
            break
        if iters >= cfg.newton_max_iter:
            raise NewtonDivergenceError(rn, iters)
        jac = eye + 0.5 * h * h * _avg_hessian_tau(pot, q, z, cfg.quadrature_nodes)
        z = z - np.linalg.solve(jac, resid)
        iters += 1
    pbar = p - h * g
    return State(pbar, z), iters, rn


def avf_hamiltonian_substep(model: LangevinModel, x: State, cfg: AvfConfig) -> State:
    """Implicit substep: returns (Pbar, Qbar); preserves |p|^2/2 + F(q)."""
    state, _, _ = _hamiltonian_substep_full(model, x, cfg)
    return state


def ou_substep(model: LangevinModel, x_bar: State, inc: OUIncrement, h: float) -> State:
    """Exact friction/noise substep: decay the momentum, add the convolution."""
    decay = math.exp(-model.v * h)
    p_new = decay * x_bar.p + model.sigma @ inc.convolved
    return State(p_new, x_bar.q)


def avf_step(model: LangevinModel, x: State, inc: OUIncrement, cfg: AvfConfig) -> StepRecord:
    """One full split step; Q_{n+1} equals the substep position exactly."""
    x_bar, iters, resid = _hamiltonian_substep_full(model, x, cfg)
    x_new = ou_substep(model, x_bar, inc, cfg.h)
    return StepRecord(x_bar=x_bar, x=x_new, newton_iters=iters, residual=resid)


def tamed_euler_step(model: LangevinModel, x: State, dW: np.ndarray, h: float) -> State:
    """Explicit step with the drift increment rescaled by 1/(1 + h|drift|)."""
    dW = np.asarray(dW, dtype=float).reshape(-1)
    g = np.asarray(model.potential.gradient(x.q), dtype=float)
    drift_p = -g - model.v * x.p
    drift_q = x.p
    nrm = math.sqrt(float(drift_p @ drift_p + drift_q @ drift_q))
    scale = h / (1.0 + h * nrm)
    return State(x.p + scale * drift_p + model.sigma @ dW, x.q + scale * drift_q)


@dataclass(frozen=True)
class IntegrationStats:
    newton_max_iters: int
    max_residual: float
    max_abs_denergy: float
    max_rel_denergy: float


def _kernelizable(model: LangevinModel) -> bool:
    return model.potential.is_polynomial and model.m <= _kernels.MAX_KERNEL_DIM


def integrate_with_stats(
    model: LangevinModel,
    scheme: str,
    path: PathHierarchy,
    h: float,
    cfg: AvfConfig | None = None,
    kernels=None,
):
    """Run a full trajectory on the coarse grid of step h.

    Returns (trajectory, stats): trajectory has shape (N+1, 2m) with rows
    (p, q); stats carries solver and energy extrema (zeros for the explicit
    scheme).  The split scheme consumes friction-weighted increments, the
    tamed scheme plain increments at its own step.
    """
    if scheme not in SCHEMES:
        raise ValueError("unknown scheme %r" % scheme)
    if path.d != model.d:
        raise ValueError("path dimension %d does not match model d=%d" % (path.d, model.d))
    r = steps_per_coarse(path, h)
    n_steps = path.n_fine // r
    if n_steps < 1:
        raise ValueError("the path does not contain a full coarse step")
    if n_steps * r != path.n_fine:
        raise ValueError("T/h must be an integer")
    if kernels is None:
        kernels = _kernels

    plain, conv = all_coarse_increments(path, h, model.v)

    if scheme == "tamed_euler":
        kicks = np.ascontiguousarray(plain @ model.sigma.T)
        if _kernelizable(model):
            pack = _kernels.poly_pack(model.potential)
            traj = kernels.tamed_trajectory(
                pack["gc"], pack["ge"], pack["goff"],
                model.v, h, kicks, model.x0.p, model.x0.q,
            )
        else:
            traj = np.empty((n_steps + 1, 2 * model.m))
            x = model.x0
            traj[0] = x.vector
            for n in range(n_steps):
                x = tamed_euler_step(model, x, plain[n], h)
                traj[n + 1] = x.vector
        if not np.isfinite(traj).all():
            raise IntegrationError("non-finite state in tamed trajectory")
        return traj, IntegrationStats(0, 0.0, 0.0, 0.0)

    if cfg is None:
        cfg = make_avf_config(model, h)
    elif cfg.h != h:
        raise ValueError("cfg.h = %g does not match h = %g" % (cfg.h, h))
    else:
        make_avf_config(model, h, cfg.newton_tol, cfg.newton_max_iter, cfg.quadrature_nodes)

    kicks = np.ascontiguousarray(conv @ model.sigma.T)
    if _kernelizable(model):
        pack = _kernels.poly_pack(model.potential)
        qx, qw = quad_rule(cfg.quadrature_nodes)
        traj, max_iters, max_resid, max_abs_dh, max_rel_dh, fail_step = kernels.avf_trajectory(
            pack["vc"], pack["ve"],
            pack["gc"], pack["ge"], pack["goff"],
            pack["hc"], pack["he"], pack["hoff"],
            model.v, h, kicks, model.x0.p, model.x0.q,
            np.ascontiguousarray(qx), np.ascontiguousarray(qw),
            cfg.newton_tol, cfg.newton_max_iter,
            model.potential.lower_offset,
        )
        if fail_step >= 0:
            raise NewtonDivergenceError(max_resid, cfg.newton_max_iter, step=fail_step)
        stats = IntegrationStats(int(max_iters), float(max_resid),
                                 float(max_abs_dh), float(max_rel_dh))
    else:
        traj = np.empty((n_steps + 1, 2 * model.m))
        x = model.x0
        traj[0] = x.vector
        max_iters = 0
        max_resid = 0.0
        max_abs_dh = 0.0
        max_rel_dh = 0.0
        for n in range(n_steps):
            inc = OUIncrement(plain=plain[n], convolved=conv[n])
            try:
                rec = avf_step(model, x, inc, cfg)
            except NewtonDivergenceError as err:
                raise NewtonDivergenceError(err.residual, err.iterations, step=n) from None
            h_before = hamiltonian(model, x)
            h_bar = hamiltonian(model, rec.x_bar)
            dh = abs(h_bar - h_before)
            max_abs_dh = max(max_abs_dh, dh)
            max_rel_dh = max(max_rel_dh, dh / (1.0 + abs(h_before)))
            max_iters = max(max_iters, rec.newton_iters)
            max_resid = max(max_resid, rec.residual)
            x = rec.x
            traj[n + 1] = x.vector
        stats = IntegrationStats(max_iters, max_resid, max_abs_dh, max_rel_dh)

    if not np.isfinite(traj).all():
        raise IntegrationError("non-finite state in split-scheme trajectory")
    return traj, stats


def integrate(
    model: LangevinModel,
    scheme: str,
    path: PathHierarchy,
    h: float,
    cfg: AvfConfig | None = None,
) -> np.ndarray:
    """Trajectory on the coarse grid; rows are (p, q) at t_n = n h."""
    traj, _ = integrate_with_stats(model, scheme, path, h, cfg)
    return traj
