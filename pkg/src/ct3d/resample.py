"""Natural cubic spline resampling of signals and volumes.

Knots sit at integer positions ``0..n-1``.  A target of length ``m > 1``
samples at ``j * (n - 1) / (m - 1)``, so the first and last samples coincide
with the first and last knots; ``m == 1`` samples the midpoint.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ParameterError


@dataclass
class NaturalSpline:
    """Natural cubic spline through the rows of ``values`` along the last axis."""

    values: np.ndarray
    moments: np.ndarray

    @classmethod
    def fit(cls, values):
        values = np.ascontiguousarray(values, dtype=np.float64)
        rows = values.reshape(-1, values.shape[-1])
        moments = kernels.natural_spline_moments(rows).reshape(values.shape)
        return cls(values, moments)

    @property
    def n(self):
        return self.values.shape[-1]

    def residual(self):
        """Max violation of the tridiagonal moment equations (and end conditions)."""
        y, M = self.values, self.moments
        if self.n < 3:
            return float(np.abs(M).max(initial=0.0))
        lhs = M[..., :-2] + 4.0 * M[..., 1:-1] + M[..., 2:]
        rhs = 6.0 * (y[..., 2:] - 2.0 * y[..., 1:-1] + y[..., :-2])
        ends = np.abs(np.stack([M[..., 0], M[..., -1]])).max()
        return float(max(np.abs(lhs - rhs).max(), ends))

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        y, M = self.values, self.moments
        n = self.n
        if n == 1:
            return np.repeat(y, t.size, axis=-1)
        i = np.clip(np.floor(t).astype(np.int64), 0, n - 2)
        b = t - i
        a = 1.0 - b
        y0, y1 = y[..., i], y[..., i + 1]
        m0, m1 = M[..., i], M[..., i + 1]
        return a * y0 + b * y1 + ((a ** 3 - a) * m0 + (b ** 3 - b) * m1) / 6.0


def sample_positions(n, m):
    if m < 1:
        raise ParameterError(f"target length must be >= 1, got {m}")
    if m == 1:
        return np.array([(n - 1) / 2.0])
    return np.arange(m) * ((n - 1) / (m - 1))


def spline_resample_1d(signal, target_len):
    signal = np.asarray(signal)
    if signal.ndim != 1 or signal.size < 1:
        raise ParameterError("signal must be a non-empty 1-D array")
    return spline_resample_axis(signal, target_len, axis=0)


def spline_resample_axis(arr, target_len, axis):
    """Resample ``arr`` along one axis; other axes are independent rows."""
    arr = np.asarray(arr)
    target_len = int(target_len)
    n = arr.shape[axis]
    t = sample_positions(n, target_len)
    if target_len == n:
        return arr.copy()
    out_dtype = arr.dtype if arr.dtype.kind == "f" else np.float64
    moved = np.moveaxis(arr, axis, -1)
    spline = NaturalSpline.fit(moved)
    return np.moveaxis(spline(t), -1, axis).astype(out_dtype, copy=False)


def spline_resample_volume(vol, target):
    """Separable resampling along Z, then Y, then X."""
    vol = np.asarray(vol)
    if vol.ndim != 3:
        raise ParameterError(f"expected a (X,Y,Z) volume, got shape {vol.shape}")
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ParameterError(f"bad target extents {target}")
    out = vol
    for axis in (2, 1, 0):
        out = spline_resample_axis(out, target[axis], axis)
    return np.ascontiguousarray(out)
