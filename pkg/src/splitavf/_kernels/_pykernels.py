"""Pure-numpy kernel backend; semantics mirror the compiled extension."""

from __future__ import annotations

import numpy as np


def _projection(coeffs, expon, offsets):
    # (n_terms, n_polys) matrix mapping monomial values to per-poly sums
    n_polys = offsets.size - 1
    proj = np.zeros((coeffs.size, n_polys))
    for j in range(n_polys):
        proj[offsets[j]:offsets[j + 1], j] = coeffs[offsets[j]:offsets[j + 1]]
    return proj


def _eval_polys_at(points, expon, proj):
    # points (k, m), expon (n_terms, m) -> (k, n_polys)
    if expon.shape[0] == 0:
        return np.zeros((points.shape[0], proj.shape[1]))
    mono = np.prod(points[:, None, :] ** expon[None, :, :], axis=2)
    return mono @ proj


def _sym_from_upper(flat, m):
    out = np.empty((m, m))
    k = 0
    for i in range(m):
        for j in range(i, m):
            out[i, j] = out[j, i] = flat[k]
            k += 1
    return out


def avf_trajectory(vc, ve, gc, ge, goff, hc, he, hoff,
                   v, h, kicks, p0, q0, qx, qw, newton_tol, max_iter, c0):
    """Run the split scheme over packed tables.

    kicks[n] is sigma @ (friction-weighted increment of step n).  Returns
    (traj (n+1, 2m), max_newton_iters, max_residual, max_abs_dh, max_rel_dh,
    fail_step) with fail_step = -1 on success; on failure the trajectory is
    truncated at the failing step and the caller raises.
    """
    m = p0.size
    n_steps = kicks.shape[0]
    gproj = _projection(gc, ge, goff)
    hproj = _projection(hc, he, hoff)
    vproj = vc.reshape(-1, 1)

    def value_at(q):
        return _eval_polys_at(q.reshape(1, -1), ve, vproj)[0, 0]

    traj = np.full((n_steps + 1, 2 * m), np.nan)
    p = p0.astype(float).copy()
    q = q0.astype(float).copy()
    traj[0, :m] = p
    traj[0, m:] = q

    eye = np.eye(m)
    decay = np.exp(-v * h)
    wg = qw
    wh = qw * qx
    hh2 = 0.5 * h * h

    max_iters = 0
    max_resid = 0.0
    max_abs_dh = 0.0
    max_rel_dh = 0.0

    for n in range(n_steps):
        target = q + h * p
        z = target.copy()
        iters = 0
        converged = False
        g = np.zeros(m)
        for _ in range(max_iter + 1):
            pts = q[None, :] + qx[:, None] * (z - q)[None, :]
            g = wg @ _eval_polys_at(pts, ge, gproj)
            resid = z - target + hh2 * g
            rn = float(np.sqrt(resid @ resid))
            if rn <= newton_tol:
                converged = True
                break
            if iters >= max_iter:
                break
            f1 = _sym_from_upper(wh @ _eval_polys_at(pts, he, hproj), m)
            jac = eye + hh2 * f1
            z = z - np.linalg.solve(jac, resid)
            iters += 1
        if not converged:
            return traj, max(max_iters, iters), rn, max_abs_dh, max_rel_dh, n
        max_iters = max(max_iters, iters)
        max_resid = max(max_resid, rn)

        pbar = p - h * g
        h_before = 0.5 * float(p @ p) + value_at(q) + c0
        h_bar = 0.5 * float(pbar @ pbar) + value_at(z) + c0
        dh = abs(h_bar - h_before)
        max_abs_dh = max(max_abs_dh, dh)
        max_rel_dh = max(max_rel_dh, dh / (1.0 + abs(h_before)))

        p = decay * pbar + kicks[n]
        q = z
        traj[n + 1, :m] = p
        traj[n + 1, m:] = q

    return traj, max_iters, max_resid, max_abs_dh, max_rel_dh, -1


def tamed_trajectory(gc, ge, goff, v, h, kicks, p0, q0):
    """Drift-tamed explicit stepping; kicks[n] is sigma @ (plain increment)."""
    m = p0.size
    n_steps = kicks.shape[0]
    gproj = _projection(gc, ge, goff)

    traj = np.empty((n_steps + 1, 2 * m))
    p = p0.astype(float).copy()
    q = q0.astype(float).copy()
    traj[0, :m] = p
    traj[0, m:] = q

    for n in range(n_steps):
        g = _eval_polys_at(q.reshape(1, -1), ge, gproj)[0]
        drift_p = -g - v * p
        drift_q = p
        nrm = float(np.sqrt(drift_p @ drift_p + drift_q @ drift_q))
        scale = h / (1.0 + h * nrm)
        p = p + scale * drift_p + kicks[n]
        q = q + scale * drift_q
        traj[n + 1, :m] = p
        traj[n + 1, m:] = q

    return traj
