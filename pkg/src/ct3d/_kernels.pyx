# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loops for the hot numerical kernels.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature; ``ct3d.kernels`` picks one at import.  All array arguments are
C-contiguous and already padded by the caller.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def conv3d_forward(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] w, tuple stride):
    cdef Py_ssize_t N = xp.shape[0], Ci = xp.shape[1]
    cdef Py_ssize_t Co = w.shape[1], H = w.shape[2], W = w.shape[3], D = w.shape[4]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2]
    cdef Py_ssize_t X = (xp.shape[2] - H) // sx + 1
    cdef Py_ssize_t Y = (xp.shape[3] - W) // sy + 1
    cdef Py_ssize_t Z = (xp.shape[4] - D) // sz + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((N, Co, X, Y, Z), dtype=dtype)
    cdef real[:, :, :, :, ::1] y = out
    cdef Py_ssize_t n, ci, co, ox, oy, oz, h, ww, d, bx, by, bz
    cdef real acc, wv
    for n in range(N):
        for co in range(Co):
            for ci in range(Ci):
                for h in range(H):
                    for ww in range(W):
                        for d in range(D):
                            wv = w[ci, co, h, ww, d]
                            for ox in range(X):
                                bx = ox * sx + h
                                for oy in range(Y):
                                    by = oy * sy + ww
                                    for oz in range(Z):
                                        y[n, co, ox, oy, oz] += wv * xp[n, ci, bx, by, oz * sz + d]
    return out


def conv3d_grad_input(real[:, :, :, :, ::1] gy, real[:, :, :, :, ::1] w, tuple padded_shape, tuple stride):
    cdef Py_ssize_t N = gy.shape[0], Co = gy.shape[1]
    cdef Py_ssize_t X = gy.shape[2], Y = gy.shape[3], Z = gy.shape[4]
    cdef Py_ssize_t Ci = w.shape[0], H = w.shape[2], W = w.shape[3], D = w.shape[4]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros(padded_shape, dtype=dtype)
    cdef real[:, :, :, :, ::1] gx = out
    cdef Py_ssize_t n, ci, co, ox, oy, oz, h, ww, d, bx, by
    cdef real wv
    for n in range(N):
        for ci in range(Ci):
            for co in range(Co):
                for h in range(H):
                    for ww in range(W):
                        for d in range(D):
                            wv = w[ci, co, h, ww, d]
                            for ox in range(X):
                                bx = ox * sx + h
                                for oy in range(Y):
                                    by = oy * sy + ww
                                    for oz in range(Z):
                                        gx[n, ci, bx, by, oz * sz + d] += wv * gy[n, co, ox, oy, oz]
    return out


def conv3d_grad_weight(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] gy, tuple kshape, tuple stride):
    cdef Py_ssize_t N = gy.shape[0], Co = gy.shape[1]
    cdef Py_ssize_t X = gy.shape[2], Y = gy.shape[3], Z = gy.shape[4]
    cdef Py_ssize_t Ci = xp.shape[1], H = kshape[2], W = kshape[3], D = kshape[4]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros(kshape, dtype=dtype)
    cdef real[:, :, :, :, ::1] gw = out
    cdef Py_ssize_t n, ci, co, ox, oy, oz, h, ww, d, bx, by
    cdef real acc
    for ci in range(Ci):
        for co in range(Co):
            for h in range(H):
                for ww in range(W):
                    for d in range(D):
                        acc = 0
                        for n in range(N):
                            for ox in range(X):
                                bx = ox * sx + h
                                for oy in range(Y):
                                    by = oy * sy + ww
                                    for oz in range(Z):
                                        acc = acc + xp[n, ci, bx, by, oz * sz + d] * gy[n, co, ox, oy, oz]
                        gw[ci, co, h, ww, d] = acc
    return out


def depthwise_forward(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] w, tuple stride):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t H = w.shape[2], W = w.shape[3], D = w.shape[4]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2]
    cdef Py_ssize_t X = (xp.shape[2] - H) // sx + 1
    cdef Py_ssize_t Y = (xp.shape[3] - W) // sy + 1
    cdef Py_ssize_t Z = (xp.shape[4] - D) // sz + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((N, C, X, Y, Z), dtype=dtype)
    cdef real[:, :, :, :, ::1] y = out
    cdef Py_ssize_t n, c, ox, oy, oz, h, ww, d, bx, by
    cdef real wv
    for n in range(N):
        for c in range(C):
            for h in range(H):
                for ww in range(W):
                    for d in range(D):
                        wv = w[c, 0, h, ww, d]
                        for ox in range(X):
                            bx = ox * sx + h
                            for oy in range(Y):
                                by = oy * sy + ww
                                for oz in range(Z):
                                    y[n, c, ox, oy, oz] += wv * xp[n, c, bx, by, oz * sz + d]
    return out


def depthwise_grad_input(real[:, :, :, :, ::1] gy, real[:, :, :, :, ::1] w, tuple padded_shape, tuple stride):
    cdef Py_ssize_t N = gy.shape[0], C = gy.shape[1]
    cdef Py_ssize_t X = gy.shape[2], Y = gy.shape[3], Z = gy.shape[4]
    cdef Py_ssize_t H = w.shape[2], W = w.shape[3], D = w.shape[4]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros(padded_shape, dtype=dtype)
    cdef real[:, :, :, :, ::1] gx = out
    cdef Py_ssize_t n, c, ox, oy, oz, h, ww, d, bx, by
    cdef real wv
    for n in range(N):
        for c in range(C):
            for h in range(H):
                for ww in range(W):
                    for d in range(D):
                        wv = w[c, 0, h, ww, d]
                        for ox in range(X):
                            bx = ox * sx + h
                            for oy in range(Y):
                                by = oy * sy + ww
                                for oz in range(Z):
                                    gx[n, c, bx, by, oz * sz + d] += wv * gy[n, c, ox, oy, oz]
    return out


def depthwise_grad_weight(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] gy, tuple kshape, tuple stride):
    cdef Py_ssize_t N = gy.shape[0], C = gy.shape[1]
    cdef Py_ssize_t X = gy.shape[2], Y = gy.shape[3], Z = gy.shape[4]
    cdef Py_ssize_t H = kshape[2], W = kshape[3], D = kshape[4]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros(kshape, dtype=dtype)
    cdef real[:, :, :, :, ::1] gw = out
    cdef Py_ssize_t n, c, ox, oy, oz, h, ww, d, bx, by
    cdef real acc
    for c in range(C):
        for h in range(H):
            for ww in range(W):
                for d in range(D):
                    acc = 0
                    for n in range(N):
                        for ox in range(X):
                            bx = ox * sx + h
                            for oy in range(Y):
                                by = oy * sy + ww
                                for oz in range(Z):
                                    acc = acc + xp[n, c, bx, by, oz * sz + d] * gy[n, c, ox, oy, oz]
                    gw[c, 0, h, ww, d] = acc
    return out


def natural_spline_moments(real[:, ::1] y):
    """Second derivatives of the natural cubic spline through each row (unit knot spacing)."""
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((rows, n), dtype=dtype)
    if n < 3:
        return out
    cdef real[:, ::1] m = out
    cdef Py_ssize_t r, i, k = n - 2
    cdef double[::1] cp = np.empty(k, dtype=np.float64)
    cdef double[::1] dp = np.empty(k, dtype=np.float64)
    cdef double denom, rhs
    for r in range(rows):
        # Thomas sweep on M[i-1] + 4 M[i] + M[i+1] = 6 (y[i+1] - 2 y[i] + y[i-1])
        for i in range(k):
            rhs = 6.0 * (<double>y[r, i + 2] - 2.0 * <double>y[r, i + 1] + <double>y[r, i])
            if i == 0:
                cp[i] = 1.0 / 4.0
                dp[i] = rhs / 4.0
            else:
                denom = 4.0 - cp[i - 1]
                cp[i] = 1.0 / denom
                dp[i] = (rhs - dp[i - 1]) / denom
        for i in range(k - 1, -1, -1):
            if i < k - 1:
                dp[i] = dp[i] - cp[i] * dp[i + 1]
            m[r, i + 1] = <real>dp[i]
    return out


def correlate_rows(real[:, ::1] xp, real[::1] kernel):
    """Valid-mode correlation of every row with ``kernel``."""
    cdef Py_ssize_t rows = xp.shape[0], K = kernel.shape[0]
    cdef Py_ssize_t n = xp.shape[1] - K + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((rows, n), dtype=dtype)
    cdef real[:, ::1] o = out
    cdef Py_ssize_t r, i, t
    cdef double acc
    for r in range(rows):
        for i in range(n):
            acc = 0.0
            for t in range(K):
                acc += kernel[t] * xp[r, i + t]
            o[r, i] = <real>acc
    return out
