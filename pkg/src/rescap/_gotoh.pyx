# cython: boundscheck=False, wraparound=False, cdivision=True
"""Gotoh affine-gap global alignment, compiled kernel.

Mirrors ``_gotoh_py.align_pair`` exactly: same recurrences, gap model,
tie-breaking and traceback codes.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY
from libc.stdlib cimport free, malloc

cnp.import_array()


def align_pair(a_codes, b_codes, sub, double gap_open, double gap_extend):
    """Align two encoded sequences; return ``(score, ops)``."""
    cdef cnp.uint8_t[::1] a = np.ascontiguousarray(a_codes, dtype=np.uint8)
    cdef cnp.uint8_t[::1] b = np.ascontiguousarray(b_codes, dtype=np.uint8)
    cdef cnp.float64_t[:, ::1] S = np.ascontiguousarray(sub, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    if n == 0 or m == 0:
        raise ValueError("empty sequence")

    cdef Py_ssize_t width = m + 1
    cdef cnp.ndarray ptr_arr = np.zeros((n + 1, width), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] ptr = ptr_arr

    cdef double *block = <double *> malloc(6 * width * sizeof(double))
    if block == NULL:
        raise MemoryError()
    cdef double *M_prev = block
    cdef double *X_prev = M_prev + width
    cdef double *Y_prev = X_prev + width
    cdef double *M_cur = Y_prev + width
    cdef double *X_cur = M_cur + width
    cdef double *Y_cur = X_cur + width

    cdef double go = gap_open
    cdef double ge = gap_extend
    cdef Py_ssize_t i, j
    cdef int pm, px, py, state
    cdef double best, m_d, x_d, y_d, m_u, x_u, y_u, m_l, x_l, y_l, score
    cdef double *tmp
    cdef const double *srow

    for j in range(width):
        M_prev[j] = -INFINITY
        X_prev[j] = -INFINITY
        Y_prev[j] = -INFINITY
    M_prev[0] = 0.0
    for j in range(1, width):
        Y_prev[j] = -(go + (j - 1) * ge)
        ptr[0, j] = (2 if j > 1 else 0) << 4

    try:
        for i in range(1, n + 1):
            srow = &S[a[i - 1], 0]
            M_cur[0] = -INFINITY
            Y_cur[0] = -INFINITY
            X_cur[0] = -(go + (i - 1) * ge)
            ptr[i, 0] = (1 if i > 1 else 0) << 2
            for j in range(1, width):
                m_d = M_prev[j - 1]
                x_d = X_prev[j - 1]
                y_d = Y_prev[j - 1]
                if m_d >= x_d and m_d >= y_d:
                    best = m_d
                    pm = 0
                elif x_d >= y_d:
                    best = x_d
                    pm = 1
                else:
                    best = y_d
                    pm = 2
                M_cur[j] = best + srow[b[j - 1]]

                m_u = M_prev[j] - go
                x_u = X_prev[j] - ge
                y_u = Y_prev[j] - go
                if m_u >= x_u and m_u >= y_u:
                    X_cur[j] = m_u
                    px = 0
                elif x_u >= y_u:
                    X_cur[j] = x_u
                    px = 1
                else:
                    X_cur[j] = y_u
                    px = 2

                m_l = M_cur[j - 1] - go
                x_l = X_cur[j - 1] - go
                y_l = Y_cur[j - 1] - ge
                if m_l >= x_l and m_l >= y_l:
                    Y_cur[j] = m_l
                    py = 0
                elif x_l >= y_l:
                    Y_cur[j] = x_l
                    py = 1
                else:
                    Y_cur[j] = y_l
                    py = 2

                ptr[i, j] = <cnp.uint8_t> (pm | (px << 2) | (py << 4))

            tmp = M_prev; M_prev = M_cur; M_cur = tmp
            tmp = X_prev; X_prev = X_cur; X_cur = tmp
            tmp = Y_prev; Y_prev = Y_cur; Y_cur = tmp

        m_d = M_prev[m]
        x_d = X_prev[m]
        y_d = Y_prev[m]
        if m_d >= x_d and m_d >= y_d:
            score = m_d
            state = 0
        elif x_d >= y_d:
            score = x_d
            state = 1
        else:
            score = y_d
            state = 2
    finally:
        free(block)

    cdef cnp.ndarray ops_arr = np.empty(n + m, dtype=np.uint8)
    cdef cnp.uint8_t[::1] ops = ops_arr
    cdef Py_ssize_t pos = n + m
    cdef int p
    i = n
    j = m
    while i > 0 or j > 0:
        p = ptr[i, j]
        pos -= 1
        if state == 0:
            ops[pos] = 0
            state = p & 3
            i -= 1
            j -= 1
        elif state == 1:
            ops[pos] = 1
            state = (p >> 2) & 3
            i -= 1
        else:
            ops[pos] = 2
            state = (p >> 4) & 3
            j -= 1
    return score, ops_arr[pos:].copy()
