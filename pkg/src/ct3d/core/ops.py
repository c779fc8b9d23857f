"""Array-level numerical primitives.

Tensors are plain numpy arrays in channel-first layout.  Spatial ops accept
either a single volume ``(C, X, Y, Z)`` or a batch ``(N, C, X, Y, Z)`` and
preserve the input dtype (float32 by default, float64 for verification).
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .. import kernels
from ..errors import ParameterError, ShapeError

DEFAULT_DTYPE = np.float32

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(data, dtype=DEFAULT_DTYPE) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ParameterError("tensor contains non-finite values")
    return arr


def triple(v, name="value"):
    if np.isscalar(v):
        v = (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ParameterError(f"{name} needs one entry per spatial axis, got {v}")
    return v


def _batched(x):
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ShapeError(f"expected (C,X,Y,Z) or (N,C,X,Y,Z), got shape {x.shape}")


def conv_output_shape(spatial, kernel, stride, padding):
    out = []
    for n, k, s, p in zip(spatial, kernel, stride, padding):
        if n + 2 * p < k:
            raise ShapeError(f"extent {n} with padding {p} admits no placement of a size-{k} kernel")
        out.append((n + 2 * p - k) // s + 1)
    return tuple(out)


def _check_conv_args(x, w, stride, padding):
    stride = triple(stride, "stride")
    padding = triple(padding, "padding")
    if min(stride) < 1 or min(padding) < 0:
        raise ParameterError(f"bad stride {stride} / padding {padding}")
    if w.ndim != 5:
        raise ShapeError(f"kernel must be rank 5 (I,O,H,W,D), got shape {w.shape}")
    conv_output_shape(x.shape[-3:], w.shape[2:], stride, padding)
    return stride, padding


def pad_spatial(x, padding):
    if not any(padding):
        return np.ascontiguousarray(x)
    widths = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    return np.pad(x, widths)


def crop_spatial(x, padding):
    px, py, pz = padding
    X, Y, Z = x.shape[2:]
    return x[:, :, px:X - px, py:Y - py, pz:Z - pz]


def conv3d(x, w, stride=1, padding=0):
    """Dense 3-D cross-correlation.

    ``w`` has layout ``(C_in, C_out, H, W, D)``.
    """
    xb, squeeze = _batched(np.asarray(x))
    stride, padding = _check_conv_args(xb, w, stride, padding)
    if xb.shape[1] != w.shape[0]:
        raise ShapeError(f"input has {xb.shape[1]} channels, kernel expects {w.shape[0]}")
    w = np.ascontiguousarray(w, dtype=xb.dtype)
    y = kernels.conv3d_forward(pad_spatial(xb, padding), w, stride)
    return y[0] if squeeze else y


def depthwise_conv3d(x, w, stride=1, padding=0):
    """Per-channel 3-D cross-correlation; ``w`` is ``(C, 1, H, W, D)``."""
    xb, squeeze = _batched(np.asarray(x))
    stride, padding = _check_conv_args(xb, w, stride, padding)
    if w.shape[1] != 1 or xb.shape[1] != w.shape[0]:
        raise ShapeError(f"depthwise kernel {w.shape} does not match {xb.shape[1]} channels")
    w = np.ascontiguousarray(w, dtype=xb.dtype)
    y = kernels.depthwise_forward(pad_spatial(xb, padding), w, stride)
    return y[0] if squeeze else y


def _channel_shape(x, axis):
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return shape


def layer_norm_stats(x, eps, axis):
    mean = x.mean(axis=axis, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return centered * rstd, rstd


def layer_norm(x, gamma, beta, eps=1e-6, axis=0):
    """Normalize over the channel axis independently at every spatial location."""
    x = np.asarray(x)
    if gamma.shape != (x.shape[axis],) or beta.shape != (x.shape[axis],):
        raise ShapeError(f"gamma/beta must have length {x.shape[axis]}")
    xhat, _ = layer_norm_stats(x, eps, axis)
    cs = _channel_shape(x, axis)
    return (xhat * gamma.reshape(cs) + beta.reshape(cs)).astype(x.dtype, copy=False)


def gelu(x):
    x = np.asarray(x)
    return (x * 0.5 * (1.0 + erf(x / _SQRT2))).astype(x.dtype, copy=False)


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def softmax(x, axis=-1):
    x = np.asarray(x)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    x = np.asarray(x)
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def linear_resize_matrix(n, m, dtype=np.float64):
    """(m, n) matrix of 1-D linear interpolation with half-pixel (align_corners=False) centers."""
    if n < 1 or m < 1:
        raise ParameterError(f"extents must be >= 1, got {n} -> {m}")
    A = np.zeros((m, n), dtype=dtype)
    if n == m:
        np.fill_diagonal(A, 1.0)
        return A
    src = (np.arange(m) + 0.5) * (n / m) - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    rows = np.arange(m)
    np.add.at(A, (rows, i0), 1.0 - frac)
    np.add.at(A, (rows, i1), frac)
    return A


def apply_along_spatial(x, mats):
    """Apply one (m, n) matrix per spatial axis of a batched tensor."""
    y = x
    for offset, A in enumerate(mats):
        if A is None:
            continue
        axis = 2 + offset
        y = np.moveaxis(np.tensordot(A, y, axes=([1], [axis])), 0, axis)
    return np.ascontiguousarray(y)


def resize_matrices(spatial, target, dtype):
    target = triple(target, "target")
    return [None if n == m else linear_resize_matrix(n, m, dtype) for n, m in zip(spatial, target)]


def trilinear_resize(x, target):
    xb, squeeze = _batched(np.asarray(x))
    mats = resize_matrices(xb.shape[2:], target, xb.dtype)
    y = apply_along_spatial(xb, mats).astype(xb.dtype, copy=False)
    return y[0] if squeeze else y
