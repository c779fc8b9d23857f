"""2D -> 3D convolution kernel inflation.

Kernels are ``(I, O, H, W)`` arrays; the inflated kernel gains a trailing
depth axis ``D``.  Three schemes are supported:

* ``full``: copy the 2D kernel to every depth slice.
* ``1g``: weight each depth slice by a Gaussian centred at ``D/2`` with
  width ``D/8``.
* ``2g``: the ``1g`` depth weight plus a Gaussian over the width index
  centred at ``W/2`` with width ``W/8``.

Each result is rescaled by one global factor so its L2 norm equals that of
the source kernel.  Gaussians are the unnormalized ``exp`` form and indices
are 0-based, with the centres exactly ``D/2`` and ``W/2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ParameterError, ShapeError


class InflationMode(str, Enum):
    FULL = "full"
    ONE_G = "1g"
    TWO_G = "2g"


@dataclass(frozen=True)
class InflationSpec:
    mode: InflationMode
    depth: int

    def __post_init__(self):
        object.__setattr__(self, "mode", InflationMode(self.mode))
        if self.depth < 1:
            raise ParameterError(f"target depth must be >= 1, got {self.depth}")


def gaussian_weight(x, mu, sigma):
    """``exp(-(x - mu)^2 / (2 sigma^2))``; vectorizes over ``x``."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    out = np.exp(-((x - mu) ** 2) / (2.0 * sigma * sigma))
    return float(out) if out.ndim == 0 else out


def _check_2d(K):
    K = np.asarray(K)
    if K.ndim != 4 or min(K.shape) < 1:
        raise ShapeError(f"2D kernel must be (I,O,H,W) with positive extents, got {K.shape}")
    return K


def _check_depth(D):
    if int(D) != D or D < 1:
        raise ParameterError(f"target depth must be a positive integer, got {D}")
    return int(D)


def depth_profile(D):
    return gaussian_weight(np.arange(D), D / 2.0, D / 8.0)


def compute_gamma(pre_norm, reference):
    """Scale that gives ``pre_norm`` the L2 norm of ``reference``.

    Returns ``(gamma, is_zero)``.  An all-zero ``pre_norm`` passes through
    with ``gamma = 1`` and ``is_zero = True``.
    """
    pre = float(np.sqrt(np.sum(np.square(pre_norm, dtype=np.float64))))
    ref = float(np.sqrt(np.sum(np.square(reference, dtype=np.float64))))
    if pre == 0.0:
        return 1.0, True
    return ref / pre, False


def _finish(pre, K):
    gamma, _ = compute_gamma(pre, K)
    return (pre * gamma).astype(K.dtype if K.dtype.kind == "f" else np.float64)


def inflate_full(K, D):
    K = _check_2d(K)
    D = _check_depth(D)
    pre = np.repeat(K.astype(np.float64)[..., None], D, axis=-1)
    return _finish(pre, K)


def inflate_1g(K, D):
    K = _check_2d(K)
    D = _check_depth(D)
    if D == 1:
        # one positive weight per entry: norm preservation forces K itself
        return K[..., None].copy()
    pre = K.astype(np.float64)[..., None] * depth_profile(D)
    return _finish(pre, K)


def inflate_2g(K, D):
    K = _check_2d(K)
    D = _check_depth(D)
    W = K.shape[3]
    width = gaussian_weight(np.arange(W), W / 2.0, W / 8.0)
    weight = depth_profile(D)[None, :] + width[:, None]  # (W, D)
    pre = K.astype(np.float64)[..., None] * weight
    return _finish(pre, K)


_INFLATORS = {
    InflationMode.FULL: inflate_full,
    InflationMode.ONE_G: inflate_1g,
    InflationMode.TWO_G: inflate_2g,
}


def inflate(K, spec: InflationSpec):
    return _INFLATORS[spec.mode](K, spec.depth)
