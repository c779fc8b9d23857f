"""Stochastic volume augmentation for CT training.

Volumes are ``(X, Y, Z)`` arrays with ``Z`` the transversal (head-to-foot)
axis and intensities already mapped to ``[0, 1]`` by :func:`normalize_hu`.

Every random decision is drawn from a Philox stream keyed by
``(seed, volume_id, op_index)``, so a volume's augmentation does not depend on
which other volumes were processed before it or on how many workers ran.
"""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import kernels
from .errors import ParameterError, ShapeError
from .resample import spline_resample_volume

HU_WINDOW = (-1000.0, 400.0)

# stream indices; never reorder, they key the random streams
OP_CROP, OP_FLIP, OP_ORIENT, OP_ROTATE, OP_ELASTIC, OP_BLUR, OP_NOISE = range(7)


def stream(seed, volume_id, op_index, sub=0):
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(volume_id), int(op_index), int(sub)])
    return np.random.Generator(np.random.Philox(ss))


def normalize_hu(vol, window=HU_WINDOW):
    """Clip to the lung window and map affinely onto ``[0, 1]``."""
    lo, hi = window
    vol = np.clip(np.asarray(vol, dtype=np.float64), lo, hi)
    return ((vol - lo) / (hi - lo)).astype(np.float32)


@dataclass
class AugmentPlan:
    flip_prob: float = 0.5
    noise_sigma_range: tuple = (0.6, 0.8)
    blur_prob: float = 0.5
    blur_sigma_range: tuple = (0.5, 1.5)
    rotate_range: tuple = (-30.0, 30.0)
    elastic_prob: float = 0.5
    elastic_alpha_range: tuple = (1.0, 7.0)
    elastic_sigma: float = 35.0
    orientation_prob: float = 0.25
    crop_prob: float = 0.5
    pre_size: int = 256
    crop_size: int = 224
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "blur_prob", "elastic_prob", "orientation_prob", "crop_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {p}")
        for name in ("noise_sigma_range", "blur_sigma_range", "elastic_alpha_range", "rotate_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ParameterError(f"{name} is empty: {lo} > {hi}")
            setattr(self, name, (float(lo), float(hi)))
        for name in ("noise_sigma_range", "blur_sigma_range", "elastic_alpha_range"):
            if getattr(self, name)[0] < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.elastic_sigma <= 0:
            raise ParameterError("elastic_sigma must be positive")
        if not 1 <= self.crop_size <= self.pre_size:
            raise ParameterError(f"need 1 <= crop_size <= pre_size, got {self.crop_size}, {self.pre_size}")

    @property
    def elastic_radius(self):
        return int(math.ceil(3 * self.elastic_sigma))

    @classmethod
    def identity(cls, **overrides):
        """Plan whose pipeline returns the small precomputed volume unchanged."""
        base = dict(flip_prob=0.0, noise_sigma_range=(0.0, 0.0), blur_prob=0.0, rotate_range=(0.0, 0.0),
                    elastic_prob=0.0, orientation_prob=0.0, crop_prob=0.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# individual transforms

def random_flip(vol, rng, prob=0.5, flips=None):
    if flips is None:
        flips = rng.random(3) < prob
    out = vol
    for axis, f in enumerate(flips):
        if f:
            out = np.flip(out, axis=axis)
    return np.ascontiguousarray(out)


def add_noise(vol, rng, sigma_range=(0.6, 0.8), sigma=None):
    if sigma is None:
        sigma = rng.uniform(*sigma_range)
    if sigma == 0:
        return vol.copy()
    noise = rng.standard_normal(vol.shape)
    return (vol + sigma * noise).astype(vol.dtype, copy=False)


def gaussian_kernel1d(sigma, radius=None):
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = int(math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-t * t / (2.0 * sigma * sigma))
    return k / k.sum()


@functools.lru_cache(maxsize=32)
def _axis_operator(n, kernel_bytes):
    """``(n, n)`` matrix equal to symmetric padding followed by valid correlation."""
    kernel = np.frombuffer(kernel_bytes, dtype=np.float64)
    r = (len(kernel) - 1) // 2
    src = np.mod(np.arange(n + 2 * r) - r, 2 * n)
    src = np.where(src >= n, 2 * n - 1 - src, src)
    M = np.zeros((n, n))
    rows = np.arange(n)
    for k, w in enumerate(kernel):
        np.add.at(M, (rows, src[k:k + n]), w)
    M.setflags(write=False)
    return M


def smooth_axis(arr, kernel, axis):
    """Correlate along one axis with half-sample symmetric padding.

    Kernels longer than the axis (the elastic sigma on small volumes) go
    through the equivalent ``(n, n)`` operator instead of a padded pass.
    """
    r = (len(kernel) - 1) // 2
    n = arr.shape[axis]
    if len(kernel) > n:
        M = _axis_operator(n, np.asarray(kernel, dtype=np.float64).tobytes())
        out = np.tensordot(M.astype(arr.dtype, copy=False), arr, axes=([1], [axis]))
        return np.moveaxis(out, 0, axis)
    moved = np.moveaxis(arr, axis, -1)
    shape = moved.shape
    widths = [(0, 0)] * (moved.ndim - 1) + [(r, r)]
    padded = np.pad(moved, widths, mode="symmetric").reshape(-1, shape[-1] + 2 * r)
    out = kernels.correlate_rows(np.ascontiguousarray(padded), kernel.astype(padded.dtype))
    return np.moveaxis(out.reshape(shape), -1, axis)


def gaussian_smooth(arr, sigma, radius=None):
    """Separable Gaussian filter over every axis of ``arr``."""
    kernel = gaussian_kernel1d(sigma, radius)
    out = np.asarray(arr, dtype=np.float64)
    for axis in range(out.ndim):
        out = smooth_axis(out, kernel, axis)
    return np.ascontiguousarray(out)


def gaussian_blur(vol, sigma):
    return gaussian_smooth(vol, sigma).astype(vol.dtype, copy=False)


def sample_trilinear(vol, coords, mode="edge", cval=0.0):
    """Interpolate ``vol`` at fractional voxel coordinates ``coords`` (3, ...).

    ``mode="edge"`` clamps coordinates into the volume; ``mode="constant"``
    returns ``cval`` wherever a coordinate leaves ``[0, n - 1]``.
    """
    shape = np.array(vol.shape)
    c = [np.asarray(coords[a], dtype=np.float64) for a in range(3)]
    outside = None
    if mode == "constant":
        eps = 1e-9
        outside = np.zeros(c[0].shape, dtype=bool)
        for a in range(3):
            outside |= (c[a] < -eps) | (c[a] > shape[a] - 1 + eps)
    c = [np.clip(c[a], 0.0, shape[a] - 1) for a in range(3)]
    lo = [np.minimum(np.floor(c[a]).astype(np.int64), max(shape[a] - 2, 0)) for a in range(3)]
    hi = [np.minimum(lo[a] + 1, shape[a] - 1) for a in range(3)]
    fr = [c[a] - lo[a] for a in range(3)]
    src = np.asarray(vol, dtype=np.float64)
    out = np.zeros(c[0].shape, dtype=np.float64)
    for ix, wx in ((lo[0], 1 - fr[0]), (hi[0], fr[0])):
        for iy, wy in ((lo[1], 1 - fr[1]), (hi[1], fr[1])):
            for iz, wz in ((lo[2], 1 - fr[2]), (hi[2], fr[2])):
                out += wx * wy * wz * src[ix, iy, iz]
    if outside is not None:
        out[outside] = cval
    return out


def rotate_transversal(vol, angle):
    """Rotate by ``angle`` degrees in the x-y plane about the volume centre."""
    if angle == 0:
        return vol.copy()
    X, Y, Z = vol.shape
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    cx, cy = (X - 1) / 2.0, (Y - 1) / 2.0
    gx, gy, gz = np.meshgrid(np.arange(X) - cx, np.arange(Y) - cy, np.arange(Z), indexing="ij")
    # inverse map: output voxel p reads input at R(-theta) p
    sx = cos * gx + sin * gy + cx
    sy = -sin * gx + cos * gy + cy
    out = sample_trilinear(vol, (sx, sy, gz.astype(np.float64)), mode="constant", cval=float(vol.min()))
    return out.astype(vol.dtype, copy=False)


@dataclass
class DeformField:
    """Displacement in voxel units, one grid per axis."""

    dx: np.ndarray
    dy: np.ndarray
    dz: np.ndarray

    def stack(self):
        return np.stack([self.dx, self.dy, self.dz])


def make_deform_field(shape, rng, alpha, sigma=35.0, radius=None):
    raw = rng.uniform(-1.0, 1.0, size=(3,) + tuple(shape))
    smooth = [gaussian_smooth(raw[a], sigma, radius) * alpha for a in range(3)]
    return DeformField(*smooth)


def elastic_deform(vol, rng, alpha_range=(1.0, 7.0), sigma=35.0, alpha=None, radius=None):
    if alpha is None:
        alpha = rng.uniform(*alpha_range)
    if alpha == 0:
        return vol.copy()
    field = make_deform_field(vol.shape, rng, alpha, sigma, radius)
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in vol.shape], indexing="ij")
    coords = [grid[a] + d for a, d in enumerate((field.dx, field.dy, field.dz))]
    return sample_trilinear(vol, coords, mode="edge").astype(vol.dtype, copy=False)


def _rotate_about(vol, axis, k):
    planes = {0: (1, 2), 1: (2, 0), 2: (0, 1)}
    return np.rot90(vol, k, axes=planes[axis])


def orient90(vol, rng, prob=0.25, turns=None):
    """Rotate by random multiples of 90 degrees about x, then y, then z.

    Applied with probability ``prob`` unless ``turns`` forces the three
    quarter-turn counts.
    """
    if turns is None:
        if rng.random() >= prob:
            return vol.copy()
        turns = rng.integers(0, 4, size=3)
    turns = [int(k) % 4 for k in turns]
    if any(turns) and len(set(vol.shape)) != 1:
        raise ShapeError(f"orientation augmentation needs a cubic volume, got {vol.shape}")
    out = vol
    for axis, k in enumerate(turns):
        if k:
            out = _rotate_about(out, axis, k)
    return np.ascontiguousarray(out)


def random_crop(vol, rng, crop_size=224, pre_size=256, offsets=None):
    if vol.shape != (pre_size,) * 3:
        raise ShapeError(f"random crop expects a {pre_size}^3 volume, got {vol.shape}")
    if offsets is None:
        offsets = rng.integers(0, pre_size - crop_size + 1, size=3)
    ox, oy, oz = (int(o) for o in offsets)
    if min(ox, oy, oz) < 0 or max(ox, oy, oz) > pre_size - crop_size:
        raise ParameterError(f"crop offsets {offsets} out of range")
    c = crop_size
    return np.ascontiguousarray(vol[ox:ox + c, oy:oy + c, oz:oz + c])


# pipeline

@dataclass
class AugmentDraw:
    """Every random decision for one pipeline application."""

    crop: bool
    crop_offsets: Optional[tuple]
    flips: tuple
    turns: Optional[tuple]
    angle: float
    elastic: bool
    alpha: float
    blur: bool
    blur_sigma: float
    noise_sigma: float


def draw_params(plan: AugmentPlan, volume_id=0):
    seed = plan.seed
    r = stream(seed, volume_id, OP_CROP)
    crop = bool(r.random() < plan.crop_prob)
    offsets = tuple(int(o) for o in r.integers(0, plan.pre_size - plan.crop_size + 1, size=3)) if crop else None

    r = stream(seed, volume_id, OP_FLIP)
    flips = tuple(bool(f) for f in r.random(3) < plan.flip_prob)

    r = stream(seed, volume_id, OP_ORIENT)
    turns = tuple(int(k) for k in r.integers(0, 4, size=3)) if r.random() < plan.orientation_prob else None

    r = stream(seed, volume_id, OP_ROTATE)
    lo, hi = plan.rotate_range
    angle = float(r.uniform(lo, hi)) if hi > lo else lo

    r = stream(seed, volume_id, OP_ELASTIC)
    elastic = bool(r.random() < plan.elastic_prob)
    alpha = float(r.uniform(*plan.elastic_alpha_range)) if elastic else 0.0

    r = stream(seed, volume_id, OP_BLUR)
    blur = bool(r.random() < plan.blur_prob)
    blur_sigma = float(r.uniform(*plan.blur_sigma_range)) if blur else 0.0

    r = stream(seed, volume_id, OP_NOISE)
    noise_sigma = float(r.uniform(*plan.noise_sigma_range))

    return AugmentDraw(crop, offsets, flips, turns, angle, elastic, alpha, blur, blur_sigma, noise_sigma)


def apply_draw(vol_pre, vol_small, plan: AugmentPlan, draw: AugmentDraw, volume_id=0, intensity=True):
    """Apply a fixed set of decisions: crop, flips, orientation, rotation, elastic, blur, noise.

    ``intensity=False`` stops after the geometric steps, which is how a
    segmentation mask follows its volume through the same draw.
    """
    size = plan.crop_size
    if draw.crop:
        if vol_pre is None:
            raise ShapeError("crop branch drawn but no pre-crop volume was supplied")
        out = random_crop(vol_pre, None, size, plan.pre_size, draw.crop_offsets)
    else:
        if vol_small is None:
            vol_small = spline_resample_volume(vol_pre, (size,) * 3)
        if vol_small.shape != (size,) * 3:
            raise ShapeError(f"expected a {size}^3 volume, got {vol_small.shape}")
        out = np.array(vol_small, dtype=np.float32)
    out = out.astype(np.float32, copy=False)
    out = random_flip(out, None, flips=draw.flips)
    if draw.turns is not None:
        out = orient90(out, None, turns=draw.turns)
    out = rotate_transversal(out, draw.angle)
    if draw.elastic:
        rng = stream(plan.seed, volume_id, OP_ELASTIC, 1)
        out = elastic_deform(out, rng, sigma=plan.elastic_sigma, alpha=draw.alpha)
    if not intensity:
        return np.ascontiguousarray(out, dtype=np.float32)
    if draw.blur:
        out = gaussian_blur(out, draw.blur_sigma)
    rng = stream(plan.seed, volume_id, OP_NOISE, 1)
    out = add_noise(out, rng, sigma=draw.noise_sigma)
    return np.ascontiguousarray(out, dtype=np.float32)


def apply_pipeline(vol_pre, vol_small, plan: AugmentPlan, volume_id=0):
    """Full augmentation of one case from its two precomputed resolutions.

    ``vol_pre`` is the ``pre_size^3`` volume used by the crop branch and
    ``vol_small`` the ``crop_size^3`` volume used otherwise.  The result
    depends only on the inputs, ``plan`` (including its seed) and
    ``volume_id``.
    """
    draw = draw_params(plan, volume_id)
    return apply_draw(vol_pre, vol_small, plan, draw, volume_id)
