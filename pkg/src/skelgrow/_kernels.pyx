# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Mirrors ``_kernels_py`` exactly.

Parallel loops only ever write disjoint outputs and every reduction runs in a
fixed serial order, so results do not depend on the thread count.
"""
import os

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport sqrt

cnp.import_array()


cdef int _threads():
    v = os.environ.get("SKELGROW_THREADS")
    if v:
        try:
            return max(1, int(v))
        except ValueError:
            return 1
    return max(1, os.cpu_count() or 1)


def lbs_forward(double[:, ::1] x, double[:, ::1] w, double[:, :, :, ::1] R, double[:, :, ::1] t):
    cdef Py_ssize_t N = R.shape[0], K = R.shape[1], P = x.shape[0]
    out_arr = np.zeros((N, P, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t n, p, k, i
    cdef double wk, x0, x1, x2
    cdef int nt = _threads()
    for p in prange(P, nogil=True, num_threads=nt, schedule="static"):
        x0 = x[p, 0]
        x1 = x[p, 1]
        x2 = x[p, 2]
        for n in range(N):
            for k in range(K):
                wk = w[p, k]
                if wk == 0.0:
                    continue
                for i in range(3):
                    out[n, p, i] += wk * (R[n, k, i, 0] * x0 + R[n, k, i, 1] * x1 + R[n, k, i, 2] * x2 + t[n, k, i])
    return out_arr


def lbs_backward(double[:, ::1] x, double[:, ::1] w, double[:, :, :, ::1] R, double[:, :, ::1] t,
                 double[:, :, ::1] g):
    cdef Py_ssize_t N = R.shape[0], K = R.shape[1], P = x.shape[0]
    gx_arr = np.zeros((P, 3))
    gw_arr = np.zeros((P, K))
    gR_arr = np.zeros((N, K, 3, 3))
    gt_arr = np.zeros((N, K, 3))
    # A[p, k, j] = sum_n sum_i g[n,p,i] R[n,k,i,j]; c[p, k] = sum_n g[n,p] . t[n,k]
    A_arr = np.zeros((P, K, 3))
    c_arr = np.zeros((P, K))
    cdef double[:, ::1] gx = gx_arr
    cdef double[:, ::1] gw = gw_arr
    cdef double[:, :, :, ::1] gR = gR_arr
    cdef double[:, :, ::1] gt = gt_arr
    cdef double[:, :, ::1] A = A_arr
    cdef double[:, ::1] c = c_arr
    cdef Py_ssize_t n, p, k, i, j
    cdef double wk, g0, g1, g2, x0, x1, x2
    cdef int nt = _threads()

    for p in prange(P, nogil=True, num_threads=nt, schedule="static"):
        for n in range(N):
            g0 = g[n, p, 0]
            g1 = g[n, p, 1]
            g2 = g[n, p, 2]
            for k in range(K):
                for j in range(3):
                    A[p, k, j] += g0 * R[n, k, 0, j] + g1 * R[n, k, 1, j] + g2 * R[n, k, 2, j]
                c[p, k] += g0 * t[n, k, 0] + g1 * t[n, k, 1] + g2 * t[n, k, 2]
        x0 = x[p, 0]
        x1 = x[p, 1]
        x2 = x[p, 2]
        for k in range(K):
            gw[p, k] = A[p, k, 0] * x0 + A[p, k, 1] * x1 + A[p, k, 2] * x2 + c[p, k]
            wk = w[p, k]
            for j in range(3):
                gx[p, j] += wk * A[p, k, j]

    # per frame: grad_R and grad_t, summed over points in index order
    for n in prange(N, nogil=True, num_threads=nt, schedule="static"):
        for p in range(P):
            x0 = x[p, 0]
            x1 = x[p, 1]
            x2 = x[p, 2]
            for k in range(K):
                wk = w[p, k]
                if wk == 0.0:
                    continue
                for i in range(3):
                    g0 = wk * g[n, p, i]
                    gt[n, k, i] += g0
                    gR[n, k, i, 0] += g0 * x0
                    gR[n, k, i, 1] += g0 * x1
                    gR[n, k, i, 2] += g0 * x2
    return gx_arr, gw_arr, gR_arr, gt_arr


def motion_kernels(double[:, :, ::1] point_traj, double[:, :, ::1] joint_traj):
    cdef Py_ssize_t N = point_traj.shape[0], P = point_traj.shape[1], K = joint_traj.shape[1]
    out_arr = np.zeros((P, K))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n, p, k
    cdef double mu, acc, d, dx, dy, dz
    cdef int nt = _threads()
    for p in prange(P, nogil=True, num_threads=nt, schedule="static"):
        for k in range(K):
            mu = 0.0
            for n in range(N):
                dx = point_traj[n, p, 0] - joint_traj[n, k, 0]
                dy = point_traj[n, p, 1] - joint_traj[n, k, 1]
                dz = point_traj[n, p, 2] - joint_traj[n, k, 2]
                mu = mu + sqrt(dx * dx + dy * dy + dz * dz)
            mu = mu / N
            acc = 0.0
            for n in range(N):
                dx = point_traj[n, p, 0] - joint_traj[n, k, 0]
                dy = point_traj[n, p, 1] - joint_traj[n, k, 1]
                dz = point_traj[n, p, 2] - joint_traj[n, k, 2]
                d = sqrt(dx * dx + dy * dy + dz * dz) - mu
                acc = acc + d * d
            out[p, k] = acc / N
    return out_arr


def nearest_neighbors(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t M = a.shape[0], Q = b.shape[0], m, q
    idx_arr = np.zeros(M, dtype=np.int64)
    d2_arr = np.zeros(M)
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef double[::1] d2 = d2_arr
    cdef double best, dx, dy, dz, dd
    cdef cnp.int64_t bi
    cdef int nt = _threads()
    for m in prange(M, nogil=True, num_threads=nt, schedule="static"):
        best = 1e300
        bi = 0
        for q in range(Q):
            dx = a[m, 0] - b[q, 0]
            dy = a[m, 1] - b[q, 1]
            dz = a[m, 2] - b[q, 2]
            dd = dx * dx + dy * dy + dz * dz
            if dd < best:
                best = dd
                bi = q
        idx[m] = bi
        d2[m] = best
    return idx_arr, d2_arr
