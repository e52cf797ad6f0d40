# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.

Each function here has a pure-numpy twin in :mod:`vocalscreen._fallback`
with the same signature and the same floating-point operation order, so the
two backends agree to rounding error.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double TAU = 1e-12


def smo_solve(double[:, ::1] K, double[::1] y, double C, double eps=1e-3,
              long max_iter=100000):
    """Solve the soft-margin SVM dual with second-order working-set selection.

    Returns ``(alpha, rho, n_iter)``; the decision function is
    ``sum_i alpha_i y_i K(x_i, x) - rho``.
    """
    cdef Py_ssize_t n = K.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] alpha_arr = np.zeros(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] G_arr = -np.ones(n)
    cdef double[::1] alpha = alpha_arr
    cdef double[::1] G = G_arr
    cdef Py_ssize_t t, i, j, k
    cdef long it = 0
    cdef double Gmax, Gmax2, obj_diff_min, grad_diff, quad, obj_diff
    cdef double delta, diff, s, old_ai, old_aj, dai, daj, Qik, Qjk
    cdef double yi, yj, Kij

    while it < max_iter:
        # working set: i maximises violation, j maximises second-order gain
        Gmax = -INFINITY
        i = -1
        for t in range(n):
            if y[t] > 0:
                if alpha[t] < C and -G[t] >= Gmax:
                    Gmax = -G[t]
                    i = t
            else:
                if alpha[t] > 0 and G[t] >= Gmax:
                    Gmax = G[t]
                    i = t
        if i < 0:
            break
        yi = y[i]
        Gmax2 = -INFINITY
        j = -1
        obj_diff_min = INFINITY
        for t in range(n):
            if y[t] > 0:
                if alpha[t] > 0:
                    grad_diff = Gmax + G[t]
                    if G[t] >= Gmax2:
                        Gmax2 = G[t]
                    if grad_diff > 0:
                        quad = K[i, i] + K[t, t] - 2.0 * yi * (yi * K[i, t])
                        if quad <= 0:
                            quad = TAU
                        obj_diff = -(grad_diff * grad_diff) / quad
                        if obj_diff <= obj_diff_min:
                            j = t
                            obj_diff_min = obj_diff
            else:
                if alpha[t] < C:
                    grad_diff = Gmax - G[t]
                    if -G[t] >= Gmax2:
                        Gmax2 = -G[t]
                    if grad_diff > 0:
                        quad = K[i, i] + K[t, t] + 2.0 * yi * (-yi * K[i, t])
                        if quad <= 0:
                            quad = TAU
                        obj_diff = -(grad_diff * grad_diff) / quad
                        if obj_diff <= obj_diff_min:
                            j = t
                            obj_diff_min = obj_diff
        if Gmax + Gmax2 < eps or j < 0:
            break
        it += 1

        yj = y[j]
        Kij = K[i, j]
        old_ai = alpha[i]
        old_aj = alpha[j]
        if yi != yj:
            quad = K[i, i] + K[j, j] + 2.0 * (yi * yj * Kij)
            if quad <= 0:
                quad = TAU
            delta = (-G[i] - G[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            quad = K[i, i] + K[j, j] - 2.0 * (yi * yj * Kij)
            if quad <= 0:
                quad = TAU
            delta = (G[i] - G[j]) / quad
            s = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if s > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = s - C
            else:
                if alpha[j] < 0:
                    alpha[j] = 0
                    alpha[i] = s
            if s > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = s - C
            else:
                if alpha[i] < 0:
                    alpha[i] = 0
                    alpha[j] = s

        dai = alpha[i] - old_ai
        daj = alpha[j] - old_aj
        for k in range(n):
            Qik = yi * y[k] * K[i, k]
            Qjk = yj * y[k] * K[j, k]
            G[k] += Qik * dai + Qjk * daj

    return alpha_arr, _rho(alpha, G, y, C), it


cdef double _rho(double[::1] alpha, double[::1] G, double[::1] y, double C):
    cdef Py_ssize_t n = alpha.shape[0], t
    cdef double ub = INFINITY, lb = -INFINITY, sum_free = 0.0, yG
    cdef long nr_free = 0
    for t in range(n):
        yG = y[t] * G[t]
        if alpha[t] >= C:
            if y[t] < 0:
                ub = min(ub, yG)
            else:
                lb = max(lb, yG)
        elif alpha[t] <= 0:
            if y[t] > 0:
                ub = min(ub, yG)
            else:
                lb = max(lb, yG)
        else:
            nr_free += 1
            sum_free += yG
    if nr_free > 0:
        return sum_free / nr_free
    return (ub + lb) / 2.0


def maxpool2x2_forward(real[:, :, :, ::1] x):
    """Non-overlapping 2x2 max pooling (odd trailing row/column dropped).

    Returns the pooled array and the winning offset (0..3) of each window.
    """
    cdef Py_ssize_t N = x.shape[0], Cc = x.shape[1]
    cdef Py_ssize_t Ho = x.shape[2] // 2, Wo = x.shape[3] // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((N, Cc, Ho, Wo), dtype=dtype)
    arg_arr = np.empty((N, Cc, Ho, Wo), dtype=np.int8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef signed char[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, c, h, w, r, q
    cdef real best, v
    cdef signed char a
    for n in range(N):
        for c in range(Cc):
            for h in range(Ho):
                r = 2 * h
                for w in range(Wo):
                    q = 2 * w
                    best = x[n, c, r, q]
                    a = 0
                    v = x[n, c, r, q + 1]
                    if v > best:
                        best = v
                        a = 1
                    v = x[n, c, r + 1, q]
                    if v > best:
                        best = v
                        a = 2
                    v = x[n, c, r + 1, q + 1]
                    if v > best:
                        best = v
                        a = 3
                    out[n, c, h, w] = best
                    arg[n, c, h, w] = a
    return out_arr, arg_arr


def maxpool2x2_backward(real[:, :, :, ::1] dout, signed char[:, :, :, ::1] arg,
                        Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t N = dout.shape[0], Cc = dout.shape[1]
    cdef Py_ssize_t Ho = dout.shape[2], Wo = dout.shape[3]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((N, Cc, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, c, h, w
    cdef signed char a
    for n in range(N):
        for c in range(Cc):
            for h in range(Ho):
                for w in range(Wo):
                    a = arg[n, c, h, w]
                    dx[n, c, 2 * h + (a >> 1), 2 * w + (a & 1)] = dout[n, c, h, w]
    return dx_arr


def col2im(real[:, :, :, :, :, ::1] dcols, Py_ssize_t Hp, Py_ssize_t Wp,
           Py_ssize_t stride):
    """Scatter-add patch gradients of shape (N, Ho, Wo, C, kh, kw) into a
    padded image gradient of shape (N, C, Hp, Wp)."""
    cdef Py_ssize_t N = dcols.shape[0], Ho = dcols.shape[1], Wo = dcols.shape[2]
    cdef Py_ssize_t Cc = dcols.shape[3], kh = dcols.shape[4], kw = dcols.shape[5]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((N, Cc, Hp, Wp), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, h, w, c, i, j, r0, q0
    for n in range(N):
        for i in range(kh):
            for j in range(kw):
                for c in range(Cc):
                    for h in range(Ho):
                        r0 = h * stride + i
                        for w in range(Wo):
                            q0 = w * stride + j
                            dx[n, c, r0, q0] += dcols[n, h, w, c, i, j]
    return dx_arr


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    """Copy every (C, kh, kw) patch of a padded (N, C, Hp, Wp) batch into a
    row of an (N * Ho * Wo, C * kh * kw) matrix."""
    cdef Py_ssize_t N = x.shape[0], Cc = x.shape[1], Hp = x.shape[2], Wp = x.shape[3]
    cdef Py_ssize_t Ho = (Hp - kh) // stride + 1, Wo = (Wp - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.empty((N * Ho * Wo, Cc * kh * kw), dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    cdef Py_ssize_t n, h, w, c, i, j, row, col
    for n in range(N):
        for h in range(Ho):
            for w in range(Wo):
                row = (n * Ho + h) * Wo + w
                col = 0
                for c in range(Cc):
                    for i in range(kh):
                        for j in range(kw):
                            cols[row, col] = x[n, c, h * stride + i, w * stride + j]
                            col += 1
    return cols_arr
