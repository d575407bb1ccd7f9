# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled selective-scan kernels.

Layouts (all C-contiguous float64):
    u, delta : (N, J, D)
    A        : (D, S)
    B, C     : (N, J, S)
    y        : (N, J, D)

The state for one (n, d) row is independent of every other row, so the
backward pass recomputes that row's J x S state history into a small
scratch buffer instead of keeping the full (N, J, D, S) tensor alive.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def scan_forward(double[:, :, ::1] u, double[:, :, ::1] delta,
                 double[:, ::1] A, double[:, :, ::1] B, double[:, :, ::1] C):
    cdef Py_ssize_t N = u.shape[0], J = u.shape[1], D = u.shape[2]
    cdef Py_ssize_t S = A.shape[1]
    cdef Py_ssize_t n, j, d, s
    cdef double dt, du, acc, hs
    out = np.zeros((N, J, D), dtype=np.float64)
    cdef double[:, :, ::1] y = out
    h_buf = np.zeros(S, dtype=np.float64)
    cdef double[::1] h = h_buf
    with nogil:
        for n in range(N):
            for d in range(D):
                for s in range(S):
                    h[s] = 0.0
                for j in range(J):
                    dt = delta[n, j, d]
                    du = dt * u[n, j, d]
                    acc = 0.0
                    for s in range(S):
                        hs = exp(dt * A[d, s]) * h[s] + du * B[n, j, s]
                        h[s] = hs
                        acc = acc + hs * C[n, j, s]
                    y[n, j, d] = acc
    return out


def scan_backward(double[:, :, ::1] u, double[:, :, ::1] delta,
                  double[:, ::1] A, double[:, :, ::1] B, double[:, :, ::1] C,
                  double[:, :, ::1] gy):
    cdef Py_ssize_t N = u.shape[0], J = u.shape[1], D = u.shape[2]
    cdef Py_ssize_t S = A.shape[1]
    cdef Py_ssize_t n, j, d, s
    cdef double dt, uu, du, g, gh, a, hprev, gdt, gu, ga

    gu_arr = np.zeros((N, J, D), dtype=np.float64)
    gdelta_arr = np.zeros((N, J, D), dtype=np.float64)
    gA_arr = np.zeros((D, S), dtype=np.float64)
    gB_arr = np.zeros((N, J, S), dtype=np.float64)
    gC_arr = np.zeros((N, J, S), dtype=np.float64)
    cdef double[:, :, ::1] gu_v = gu_arr
    cdef double[:, :, ::1] gdelta = gdelta_arr
    cdef double[:, ::1] gA = gA_arr
    cdef double[:, :, ::1] gB = gB_arr
    cdef double[:, :, ::1] gC = gC_arr

    hist_arr = np.zeros((J, S), dtype=np.float64)
    dA_arr = np.zeros((J, S), dtype=np.float64)
    carry_arr = np.zeros(S, dtype=np.float64)
    cdef double[:, ::1] hist = hist_arr
    cdef double[:, ::1] dA = dA_arr
    cdef double[::1] carry = carry_arr

    with nogil:
        for n in range(N):
            for d in range(D):
                # replay this row's states
                for j in range(J):
                    dt = delta[n, j, d]
                    du = dt * u[n, j, d]
                    for s in range(S):
                        a = exp(dt * A[d, s])
                        dA[j, s] = a
                        if j > 0:
                            hprev = hist[j - 1, s]
                        else:
                            hprev = 0.0
                        hist[j, s] = a * hprev + du * B[n, j, s]
                for s in range(S):
                    carry[s] = 0.0
                for j in range(J - 1, -1, -1):
                    dt = delta[n, j, d]
                    uu = u[n, j, d]
                    g = gy[n, j, d]
                    gdt = 0.0
                    gu = 0.0
                    for s in range(S):
                        gh = g * C[n, j, s] + carry[s]
                        gC[n, j, s] += g * hist[j, s]
                        if j > 0:
                            hprev = hist[j - 1, s]
                        else:
                            hprev = 0.0
                        a = dA[j, s]
                        ga = gh * hprev * a
                        gdt = gdt + ga * A[d, s] + gh * B[n, j, s] * uu
                        gA[d, s] += ga * dt
                        gB[n, j, s] += gh * dt * uu
                        gu = gu + gh * dt * B[n, j, s]
                        carry[s] = gh * a
                    gdelta[n, j, d] = gdt
                    gu_v[n, j, d] = gu
    return gu_arr, gdelta_arr, gA_arr, gB_arr, gC_arr
