# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled chain-growth kernel; same contract as foldcf._chain_py."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin

cnp.import_array()


def chain_forward(angles):
    cdef double[:, ::1] ang = np.ascontiguousarray(angles, dtype=np.float64)
    cdef Py_ssize_t n = ang.shape[1]
    frames_arr = np.empty((n, 3, 3))
    coords_arr = np.zeros((3, n))
    cdef double[:, :, ::1] F = frames_arr
    cdef double[:, ::1] X = coords_arr
    cdef double M[3][3]
    cdef double ct, st, cp, sp, m0, m1, m2
    cdef Py_ssize_t i, r, a, b
    for a in range(3):
        for b in range(3):
            F[0, a, b] = 1.0 if a == b else 0.0
    for i in range(1, n):
        ct = cos(ang[0, i]); st = sin(ang[0, i])
        cp = cos(ang[1, i]); sp = sin(ang[1, i])
        # Rz(phi) @ Ry(theta)
        M[0][0] = cp * ct; M[0][1] = -sp; M[0][2] = cp * st
        M[1][0] = sp * ct; M[1][1] = cp;  M[1][2] = sp * st
        M[2][0] = -st;     M[2][1] = 0.0; M[2][2] = ct
        for r in range(3):
            m0 = F[i - 1, r, 0]; m1 = F[i - 1, r, 1]; m2 = F[i - 1, r, 2]
            for b in range(3):
                F[i, r, b] = m0 * M[0][b] + m1 * M[1][b] + m2 * M[2][b]
            X[r, i] = X[r, i - 1] + F[i, r, 0]
    return coords_arr, frames_arr


def chain_backward(frames, grad_coords):
    cdef double[:, :, ::1] F = np.ascontiguousarray(frames, dtype=np.float64)
    cdef double[:, ::1] g = np.ascontiguousarray(grad_coords, dtype=np.float64)
    cdef Py_ssize_t n = g.shape[1]
    out_arr = np.zeros((2, n))
    cdef double[:, ::1] out = out_arr
    cdef double c0 = 0.0, c1 = 0.0, c2 = 0.0
    cdef double t0 = 0.0, t1 = 0.0, t2 = 0.0
    cdef double b0, b1, b2
    cdef Py_ssize_t k
    for k in range(n - 1, 0, -1):
        c0 += g[0, k]; c1 += g[1, k]; c2 += g[2, k]
        b0 = F[k, 0, 0]; b1 = F[k, 1, 0]; b2 = F[k, 2, 0]
        t0 += b1 * c2 - b2 * c1
        t1 += b2 * c0 - b0 * c2
        t2 += b0 * c1 - b1 * c0
        out[0, k] = F[k, 0, 1] * t0 + F[k, 1, 1] * t1 + F[k, 2, 1] * t2
        out[1, k] = F[k - 1, 0, 2] * t0 + F[k - 1, 1, 2] * t1 + F[k - 1, 2, 2] * t2
    return out_arr
