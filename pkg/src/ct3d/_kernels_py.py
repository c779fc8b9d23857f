"""Pure numpy implementations of the kernels in ``_kernels.pyx``.

Each spatial convolution is a loop over kernel taps; the work per tap is one
vectorized multiply-add over the whole output grid.
"""
import numpy as np


def _window(xp, h, w, d, out_shape, stride):
    X, Y, Z = out_shape
    sx, sy, sz = stride
    return xp[:, :, h:h + sx * (X - 1) + 1:sx, w:w + sy * (Y - 1) + 1:sy, d:d + sz * (Z - 1) + 1:sz]


def _out_shape(padded, kernel, stride):
    return tuple((p - k) // s + 1 for p, k, s in zip(padded, kernel, stride))


def conv3d_forward(xp, w, stride):
    N = xp.shape[0]
    Co, H, W, D = w.shape[1:]
    osz = _out_shape(xp.shape[2:], (H, W, D), stride)
    y = np.zeros((N, Co) + osz, dtype=xp.dtype)
    for h in range(H):
        for ww in range(W):
            for d in range(D):
                patch = _window(xp, h, ww, d, osz, stride)
                y += np.einsum("nixyz,io->noxyz", patch, w[:, :, h, ww, d])
    return y


def conv3d_grad_input(gy, w, padded_shape, stride):
    H, W, D = w.shape[2:]
    gx = np.zeros(padded_shape, dtype=gy.dtype)
    osz = gy.shape[2:]
    for h in range(H):
        for ww in range(W):
            for d in range(D):
                _window(gx, h, ww, d, osz, stride)[...] += np.einsum(
                    "noxyz,io->nixyz", gy, w[:, :, h, ww, d])
    return gx


def conv3d_grad_weight(xp, gy, kshape, stride):
    H, W, D = kshape[2:]
    gw = np.zeros(kshape, dtype=gy.dtype)
    osz = gy.shape[2:]
    for h in range(H):
        for ww in range(W):
            for d in range(D):
                patch = _window(xp, h, ww, d, osz, stride)
                gw[:, :, h, ww, d] = np.einsum("nixyz,noxyz->io", patch, gy)
    return gw


def depthwise_forward(xp, w, stride):
    N, C = xp.shape[:2]
    H, W, D = w.shape[2:]
    osz = _out_shape(xp.shape[2:], (H, W, D), stride)
    y = np.zeros((N, C) + osz, dtype=xp.dtype)
    for h in range(H):
        for ww in range(W):
            for d in range(D):
                tap = w[:, 0, h, ww, d][None, :, None, None, None]
                y += tap * _window(xp, h, ww, d, osz, stride)
    return y


def depthwise_grad_input(gy, w, padded_shape, stride):
    H, W, D = w.shape[2:]
    gx = np.zeros(padded_shape, dtype=gy.dtype)
    osz = gy.shape[2:]
    for h in range(H):
        for ww in range(W):
            for d in range(D):
                tap = w[:, 0, h, ww, d][None, :, None, None, None]
                _window(gx, h, ww, d, osz, stride)[...] += tap * gy
    return gx


def depthwise_grad_weight(xp, gy, kshape, stride):
    H, W, D = kshape[2:]
    gw = np.zeros(kshape, dtype=gy.dtype)
    osz = gy.shape[2:]
    for h in range(H):
        for ww in range(W):
            for d in range(D):
                patch = _window(xp, h, ww, d, osz, stride)
                gw[:, 0, h, ww, d] = np.einsum("ncxyz,ncxyz->c", patch, gy)
    return gw


def natural_spline_moments(y):
    """Second derivatives of the natural cubic spline through each row (unit knot spacing)."""
    rows, n = y.shape
    m = np.zeros((rows, n), dtype=y.dtype)
    if n < 3:
        return m
    k = n - 2
    y64 = y.astype(np.float64)
    rhs = 6.0 * (y64[:, 2:] - 2.0 * y64[:, 1:-1] + y64[:, :-2])
    cp = np.empty(k)
    dp = np.empty((rows, k))
    cp[0] = 0.25
    dp[:, 0] = rhs[:, 0] / 4.0
    for i in range(1, k):
        denom = 4.0 - cp[i - 1]
        cp[i] = 1.0 / denom
        dp[:, i] = (rhs[:, i] - dp[:, i - 1]) / denom
    for i in range(k - 2, -1, -1):
        dp[:, i] -= cp[i] * dp[:, i + 1]
    m[:, 1:-1] = dp
    return m


def correlate_rows(xp, kernel):
    """Valid-mode correlation of every row with ``kernel``."""
    K = kernel.shape[0]
    n = xp.shape[1] - K + 1
    acc = np.zeros((xp.shape[0], n), dtype=np.float64)
    for t in range(K):
        acc += float(kernel[t]) * xp[:, t:t + n]
    return acc.astype(xp.dtype)
