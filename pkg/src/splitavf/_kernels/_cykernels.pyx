# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel backend; semantics mirror _pykernels exactly."""

from libc.math cimport exp, fabs, sqrt

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef inline double _monomial(const double* y, const cnp.int64_t* expo, Py_ssize_t m) noexcept nogil:
    cdef double pw = 1.0
    cdef double yi
    cdef Py_ssize_t i, k, e
    for i in range(m):
        e = expo[i]
        yi = y[i]
        for k in range(e):
            pw *= yi
    return pw


cdef inline double _poly_value(const double[::1] coeffs, const cnp.int64_t[:, ::1] expo,
                               Py_ssize_t lo, Py_ssize_t hi, const double* y,
                               Py_ssize_t m) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t t
    for t in range(lo, hi):
        acc += coeffs[t] * _monomial(y, &expo[t, 0], m)
    return acc


cdef inline int _solve_inplace(double* a, double* b, Py_ssize_t m) noexcept nogil:
    # Gaussian elimination with partial pivoting on row-major a (m x m); b (m).
    cdef Py_ssize_t i, j, k, piv
    cdef double best, tmp, f
    for k in range(m):
        piv = k
        best = fabs(a[k * m + k])
        for i in range(k + 1, m):
            if fabs(a[i * m + k]) > best:
                best = fabs(a[i * m + k])
                piv = i
        if best == 0.0:
            return 1
        if piv != k:
            for j in range(m):
                tmp = a[k * m + j]
                a[k * m + j] = a[piv * m + j]
                a[piv * m + j] = tmp
            tmp = b[k]
            b[k] = b[piv]
            b[piv] = tmp
        for i in range(k + 1, m):
            f = a[i * m + k] / a[k * m + k]
            if f != 0.0:
                for j in range(k, m):
                    a[i * m + j] -= f * a[k * m + j]
                b[i] -= f * b[k]
    for k in range(m - 1, -1, -1):
        tmp = b[k]
        for j in range(k + 1, m):
            tmp -= a[k * m + j] * b[j]
        b[k] = tmp / a[k * m + k]
    return 0


def avf_trajectory(const double[::1] vc, const cnp.int64_t[:, ::1] ve,
                   const double[::1] gc, const cnp.int64_t[:, ::1] ge, const cnp.int64_t[::1] goff,
                   const double[::1] hc, const cnp.int64_t[:, ::1] he, const cnp.int64_t[::1] hoff,
                   double v, double h, const double[:, ::1] kicks,
                   const double[::1] p0, const double[::1] q0,
                   const double[::1] qx, const double[::1] qw,
                   double newton_tol, int max_iter, double c0):
    cdef Py_ssize_t m = p0.shape[0]
    cdef Py_ssize_t n_steps = kicks.shape[0]
    cdef Py_ssize_t n_q = qx.shape[0]
    if m > 8 or n_q > 32:
        raise ValueError("kernel supports m <= 8, n_q <= 32")

    traj_arr = np.full((n_steps + 1, 2 * m), np.nan)
    cdef double[:, ::1] traj = traj_arr

    cdef double p[8]
    cdef double q[8]
    cdef double z[8]
    cdef double target[8]
    cdef double g[8]
    cdef double gnode[8]
    cdef double resid[8]
    cdef double pt[8]
    cdef double jac[64]
    cdef double delta[8]
    cdef double pbar[8]

    cdef Py_ssize_t i, j, k, n, it, pair
    cdef double decay = exp(-v * h)
    cdef double hh2 = 0.5 * h * h
    cdef double rn, wk, xk, hij, h_before, h_bar, dh
    cdef int iters, converged
    cdef int max_iters = 0
    cdef double max_resid = 0.0
    cdef double max_abs_dh = 0.0
    cdef double max_rel_dh = 0.0
    cdef Py_ssize_t fail_step = -1

    for i in range(m):
        p[i] = p0[i]
        q[i] = q0[i]
        traj[0, i] = p[i]
        traj[0, m + i] = q[i]

    for n in range(n_steps):
        for i in range(m):
            target[i] = q[i] + h * p[i]
            z[i] = target[i]
        iters = 0
        converged = 0
        rn = 0.0
        for it in range(max_iter + 1):
            for i in range(m):
                g[i] = 0.0
            for k in range(n_q):
                xk = qx[k]
                wk = qw[k]
                for i in range(m):
                    pt[i] = q[i] + xk * (z[i] - q[i])
                for j in range(m):
                    gnode[j] = _poly_value(gc, ge, goff[j], goff[j + 1], pt, m)
                for i in range(m):
                    g[i] += wk * gnode[i]
            rn = 0.0
            for i in range(m):
                resid[i] = z[i] - target[i] + hh2 * g[i]
                rn += resid[i] * resid[i]
            rn = sqrt(rn)
            if rn <= newton_tol:
                converged = 1
                break
            if iters >= max_iter:
                break
            # Jacobian I + (h^2/2) * sum_k w_k x_k Hess(pt_k)
            for i in range(m * m):
                jac[i] = 0.0
            for k in range(n_q):
                xk = qx[k]
                wk = qw[k] * xk
                for i in range(m):
                    pt[i] = q[i] + xk * (z[i] - q[i])
                pair = 0
                for i in range(m):
                    for j in range(i, m):
                        hij = wk * _poly_value(hc, he, hoff[pair], hoff[pair + 1], pt, m)
                        jac[i * m + j] += hij
                        if i != j:
                            jac[j * m + i] += hij
                        pair += 1
            for i in range(m):
                for j in range(m):
                    jac[i * m + j] *= hh2
                jac[i * m + i] += 1.0
                delta[i] = resid[i]
            if _solve_inplace(jac, delta, m) != 0:
                converged = 0
                break
            for i in range(m):
                z[i] -= delta[i]
            iters += 1
        if converged == 0:
            if iters > max_iters:
                max_iters = iters
            # report the failing step's residual, as the fallback does
            max_resid = rn
            fail_step = n
            break
        if iters > max_iters:
            max_iters = iters
        if rn > max_resid:
            max_resid = rn

        h_before = c0 + _poly_value(vc, ve, 0, vc.shape[0], q, m)
        h_bar = c0 + _poly_value(vc, ve, 0, vc.shape[0], z, m)
        for i in range(m):
            pbar[i] = p[i] - h * g[i]
            h_before += 0.5 * p[i] * p[i]
            h_bar += 0.5 * pbar[i] * pbar[i]
        dh = fabs(h_bar - h_before)
        if dh > max_abs_dh:
            max_abs_dh = dh
        if dh / (1.0 + fabs(h_before)) > max_rel_dh:
            max_rel_dh = dh / (1.0 + fabs(h_before))

        for i in range(m):
            p[i] = decay * pbar[i] + kicks[n, i]
            q[i] = z[i]
            traj[n + 1, i] = p[i]
            traj[n + 1, m + i] = q[i]

    return traj_arr, max_iters, max_resid, max_abs_dh, max_rel_dh, fail_step


def tamed_trajectory(const double[::1] gc, const cnp.int64_t[:, ::1] ge, const cnp.int64_t[::1] goff,
                     double v, double h, const double[:, ::1] kicks,
                     const double[::1] p0, const double[::1] q0):
    cdef Py_ssize_t m = p0.shape[0]
    cdef Py_ssize_t n_steps = kicks.shape[0]
    if m > 8:
        raise ValueError("kernel supports m <= 8")

    traj_arr = np.empty((n_steps + 1, 2 * m))
    cdef double[:, ::1] traj = traj_arr

    cdef double p[8]
    cdef double q[8]
    cdef double dp[8]
    cdef double g
    cdef Py_ssize_t i, n
    cdef double nrm, scale

    for i in range(m):
        p[i] = p0[i]
        q[i] = q0[i]
        traj[0, i] = p[i]
        traj[0, m + i] = q[i]

    for n in range(n_steps):
        nrm = 0.0
        for i in range(m):
            g = _poly_value(gc, ge, goff[i], goff[i + 1], q, m)
            dp[i] = -g - v * p[i]
            nrm += dp[i] * dp[i] + p[i] * p[i]
        nrm = sqrt(nrm)
        scale = h / (1.0 + h * nrm)
        for i in range(m):
            q[i] = q[i] + scale * p[i]
        for i in range(m):
            p[i] = p[i] + scale * dp[i] + kicks[n, i]
            traj[n + 1, i] = p[i]
            traj[n + 1, m + i] = q[i]

    return traj_arr
