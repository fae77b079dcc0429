# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Euler path-stepping kernels.

``step_paths`` mirrors kernels.step_paths_numpy. ``fused_paths`` additionally
evaluates the control, disturbance and weighted-output values at every node
and accumulates their trapezoid cost integrals (plus optional node statistics)
inside the stepping loop, so light simulations never materialize the full
path array. Loops run steps outermost so the read and write rows stay
cache-resident across the path sweep.
"""

from libc.math cimport sqrt

import numpy as np
cimport numpy as cnp

cnp.import_array()

DEF MAXDIM = 16


def step_paths(double[:, :, ::1] F1, double[:, :, ::1] F2,
               double[:, ::1] f1, double[:, ::1] f2,
               double[:, :, ::1] E1, double[:, :, ::1] E2, int has_extra,
               double[:, ::1] X0, double[:, ::1] noise,
               double dt, double[:, :, ::1] out):
    cdef Py_ssize_t K = noise.shape[0]
    cdef Py_ssize_t P = X0.shape[0]
    cdef Py_ssize_t n = X0.shape[1]
    cdef Py_ssize_t k, p, i, j
    cdef double sq = sqrt(dt)
    cdef double dr, df, w

    with nogil:
        for p in range(P):
            for i in range(n):
                out[0, p, i] = X0[p, i]
        for k in range(K):
            for p in range(P):
                w = sq * noise[k, p]
                for i in range(n):
                    dr = f1[k, i]
                    df = f2[k, i]
                    for j in range(n):
                        dr += F1[k, i, j] * out[k, p, j]
                        df += F2[k, i, j] * out[k, p, j]
                    if has_extra:
                        dr += E1[k, p, i]
                        df += E2[k, p, i]
                    out[k + 1, p, i] = out[k, p, i] + dt * dr + w * df
    return None


def fused_paths(double[:, :, ::1] F1, double[:, :, ::1] F2,
                double[:, ::1] f1, double[:, ::1] f2,
                int has_upath, double[:, :, ::1] upath,
                int has_vpath, double[:, :, ::1] vpath,
                double[:, :, ::1] B1, double[:, :, ::1] B2,
                double[:, :, ::1] C1, double[:, :, ::1] C2,
                double[:, :, ::1] Gu, double[:, ::1] uoff,
                double[:, :, ::1] Gv, double[:, ::1] voff,
                double[:, :, ::1] Qm,
                double[:, ::1] X0, double[:, ::1] noise,
                double dt, double[::1] tw,
                int want_x, double[:, :, ::1] xout,
                double[::1] int_u, double[::1] int_v, double[::1] int_qx,
                int want_stats, double[:, ::1] node_sum, double[:, ::1] node_sumsq,
                double[::1] sup_sq,
                double[::1] node_u_sq, double[::1] node_v_sq, double[::1] node_qx_sq):
    cdef Py_ssize_t K = noise.shape[0]
    cdef Py_ssize_t P = X0.shape[0]
    cdef Py_ssize_t n = X0.shape[1]
    cdef Py_ssize_t du = uoff.shape[1]
    cdef Py_ssize_t dv = voff.shape[1]
    cdef Py_ssize_t dq = Qm.shape[1]
    cdef Py_ssize_t k, p, i, j, c
    cdef double sq = sqrt(dt)
    cdef double dr, df, w, acc, ssq, val
    cdef double x[MAXDIM]
    cdef double xn[MAXDIM]
    cdef cnp.ndarray xrow_arr = np.empty((P, n), dtype=np.float64)
    cdef double[:, ::1] xrow = xrow_arr

    if n > MAXDIM or du > MAXDIM or dv > MAXDIM or dq > MAXDIM:
        raise ValueError("dimension above compiled kernel limit")

    with nogil:
        for p in range(P):
            for i in range(n):
                xrow[p, i] = X0[p, i]
                if want_x:
                    xout[0, p, i] = X0[p, i]
            int_u[p] = 0.0
            int_v[p] = 0.0
            int_qx[p] = 0.0
            sup_sq[p] = 0.0
        for k in range(K + 1):
            w = tw[k]
            for p in range(P):
                for i in range(n):
                    x[i] = xrow[p, i]
                # control value and cost
                acc = 0.0
                for c in range(du):
                    val = uoff[k, c]
                    for j in range(n):
                        val += Gu[k, c, j] * x[j]
                    if has_upath:
                        val += upath[k, p, c]
                    acc += val * val
                int_u[p] += w * acc
                if want_stats:
                    node_u_sq[k] += acc
                acc = 0.0
                for c in range(dv):
                    val = voff[k, c]
                    for j in range(n):
                        val += Gv[k, c, j] * x[j]
                    if has_vpath:
                        val += vpath[k, p, c]
                    acc += val * val
                int_v[p] += w * acc
                if want_stats:
                    node_v_sq[k] += acc
                acc = 0.0
                for c in range(dq):
                    val = 0.0
                    for j in range(n):
                        val += Qm[k, c, j] * x[j]
                    acc += val * val
                int_qx[p] += w * acc
                if want_stats:
                    node_qx_sq[k] += acc
                    ssq = 0.0
                    for i in range(n):
                        node_sum[k, i] += x[i]
                        node_sumsq[k, i] += x[i] * x[i]
                        ssq += x[i] * x[i]
                    if ssq > sup_sq[p]:
                        sup_sq[p] = ssq
                if k == K:
                    continue
                # step
                for i in range(n):
                    dr = f1[k, i]
                    df = f2[k, i]
                    for j in range(n):
                        dr += F1[k, i, j] * x[j]
                        df += F2[k, i, j] * x[j]
                    if has_upath:
                        for c in range(du):
                            dr += B1[k, i, c] * upath[k, p, c]
                            df += B2[k, i, c] * upath[k, p, c]
                    if has_vpath:
                        for c in range(dv):
                            dr += C1[k, i, c] * vpath[k, p, c]
                            df += C2[k, i, c] * vpath[k, p, c]
                    xn[i] = x[i] + dt * dr + sq * noise[k, p] * df
                for i in range(n):
                    xrow[p, i] = xn[i]
                    if want_x:
                        xout[k + 1, p, i] = xn[i]
    return None
