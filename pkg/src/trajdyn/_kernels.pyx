# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled simulation and indexing kernels.

Drop-in replacements for the functions in ``_kernels_py``; same arguments,
same return layout.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, fabs

cnp.import_array()


cdef inline void _cartpole(double* s, double force, double mc, double mp,
                           double l, double g, double dt, double* out) nogil:
    cdef double total = mc + mp
    cdef double c = cos(s[2])
    cdef double sn = sin(s[2])
    cdef double temp = (force + mp * l * s[3] * s[3] * sn) / total
    cdef double thacc = (g * sn - c * temp) / (l * (4.0 / 3.0 - mp * c * c / total))
    cdef double xacc = temp - mp * l * thacc * c / total
    out[0] = s[0] + dt * s[1]
    out[1] = s[1] + dt * xacc
    out[2] = s[2] + dt * s[3]
    out[3] = s[3] + dt * thacc


def cartpole_step_batch(states, forces, double mc, double mp, double l,
                        double g, double dt):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] s = np.ascontiguousarray(states, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] f = np.ascontiguousarray(forces, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t n = s.shape[0], i
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, 4))
    for i in range(n):
        _cartpole(&s[i, 0], f[i], mc, mp, l, g, dt, &out[i, 0])
    return out


def cartpole_linear_rollout_batch(s0, gains, int n_steps, double mc, double mp,
                                  double l, double g, double dt,
                                  double angle_limit, double position_limit):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] K = np.ascontiguousarray(np.atleast_2d(gains), dtype=np.float64)
    cdef Py_ssize_t n = K.shape[0], i, t, k, r
    cdef cnp.ndarray[cnp.float64_t, ndim=2] init = np.ascontiguousarray(
        np.broadcast_to(np.asarray(s0, dtype=np.float64), (n, 4)))
    cdef cnp.ndarray[cnp.float64_t, ndim=3] states = np.empty((n, n_steps + 1, 4))
    cdef cnp.ndarray[cnp.int64_t, ndim=1] lengths = np.full(n, n_steps, dtype=np.int64)
    cdef double force
    with nogil:
        for i in range(n):
            for k in range(4):
                states[i, 0, k] = init[i, k]
            for t in range(n_steps):
                force = -(K[i, 0] * states[i, t, 0] + K[i, 1] * states[i, t, 1]
                          + K[i, 2] * states[i, t, 2] + K[i, 3] * states[i, t, 3])
                _cartpole(&states[i, t, 0], force, mc, mp, l, g, dt, &states[i, t + 1, 0])
                if fabs(states[i, t + 1, 2]) > angle_limit or fabs(states[i, t + 1, 0]) > position_limit:
                    lengths[i] = t + 1
                    for r in range(t + 2, n_steps + 1):
                        for k in range(4):
                            states[i, r, k] = states[i, r - 1, k]
                    break
    return states, lengths


def arm_step_batch(states, torques, double m1, double m2, double l1, double l2,
                   double g, double dt):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] s = np.ascontiguousarray(states, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] u = np.ascontiguousarray(torques, dtype=np.float64)
    cdef Py_ssize_t n = s.shape[0], i
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, 4))
    cdef double c1 = 0.5 * l1, c2 = 0.5 * l2
    cdef double i1 = m1 * l1 * l1 / 12.0, i2 = m2 * l2 * l2 / 12.0
    cdef double q1, dq1, q2, dq2, cos2, sin2, m11, m12, m22, hc, g1, g2, r1, r2, det
    with nogil:
        for i in range(n):
            q1 = s[i, 0]; dq1 = s[i, 1]; q2 = s[i, 2]; dq2 = s[i, 3]
            cos2 = cos(q2); sin2 = sin(q2)
            m11 = m1 * c1 * c1 + i1 + m2 * (l1 * l1 + c2 * c2 + 2.0 * l1 * c2 * cos2) + i2
            m12 = m2 * (c2 * c2 + l1 * c2 * cos2) + i2
            m22 = m2 * c2 * c2 + i2
            hc = m2 * l1 * c2 * sin2
            g1 = (m1 * c1 + m2 * l1) * g * sin(q1) + m2 * c2 * g * sin(q1 + q2)
            g2 = m2 * c2 * g * sin(q1 + q2)
            r1 = u[i, 0] + hc * (2.0 * dq1 * dq2 + dq2 * dq2) - g1
            r2 = u[i, 1] - hc * dq1 * dq1 - g2
            det = m11 * m22 - m12 * m12
            out[i, 1] = dq1 + dt * (m22 * r1 - m12 * r2) / det
            out[i, 3] = dq2 + dt * (m11 * r2 - m12 * r1) / det
            out[i, 0] = q1 + dt * out[i, 1]
            out[i, 2] = q2 + dt * out[i, 3]
    return out


def relabel_index(lengths):
    cdef cnp.ndarray[cnp.int64_t, ndim=1] L = np.ascontiguousarray(lengths, dtype=np.int64)
    cdef Py_ssize_t j, i, h, pos = 0, total = 0
    for j in range(L.shape[0]):
        if L[j] > 0:
            total += L[j] * (L[j] + 1) // 2
    cdef cnp.ndarray[cnp.int64_t, ndim=1] traj = np.empty(total, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] start = np.empty(total, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] horizon = np.empty(total, dtype=np.int64)
    with nogil:
        for j in range(L.shape[0]):
            for i in range(L[j]):
                for h in range(1, L[j] - i + 1):
                    traj[pos] = j
                    start[pos] = i
                    horizon[pos] = h
                    pos += 1
    return traj, start, horizon
