"""Synthetic spheres-vs-cubes volumes for smoke tests and demos."""
from __future__ import annotations

import numpy as np

from .resample import spline_resample_volume
from .train_eval import LabeledCase, TrainSample

SPHERE, CUBE = 0, 1


def render_shape(kind, size, center, radius, background=0.1, foreground=0.8):
    """Volume of side ``size`` holding one sphere (L2 ball) or axis-aligned cube (L-inf ball).

    ``center`` and ``radius`` are in fractions of the side length.  Returns
    ``(volume, mask)``.
    """
    g = (np.arange(size) + 0.5) / size
    x, y, z = np.meshgrid(g - center[0], g - center[1], g - center[2], indexing="ij")
    if kind == SPHERE:
        dist = np.sqrt(x * x + y * y + z * z)
    elif kind == CUBE:
        dist = np.maximum(np.maximum(np.abs(x), np.abs(y)), np.abs(z))
    else:
        raise ValueError(f"unknown shape kind {kind}")
    mask = (dist <= radius).astype(np.uint8)
    vol = np.where(mask, foreground, background).astype(np.float32)
    return vol, mask


def make_case(kind, rng, pre_size=40, size=32, equal_volume=False):
    """One case.  By default cubes (half-side 0.20-0.26) are bigger than
    spheres (radius 0.15-0.21); ``equal_volume`` matches the two volumes so
    only the shape differs, a much harder task.
    """
    center = rng.uniform(0.4, 0.6, 3)
    if equal_volume:
        half = rng.uniform(0.15, 0.22)
        radius = half if kind == CUBE else half * (6.0 / np.pi) ** (1.0 / 3.0)
    else:
        radius = rng.uniform(0.20, 0.26) if kind == CUBE else rng.uniform(0.15, 0.21)
    background = rng.uniform(0.0, 0.1)
    foreground = rng.uniform(0.9, 1.0)
    pre, mask_pre = render_shape(kind, pre_size, center, radius, background, foreground)
    small = spline_resample_volume(pre, (size,) * 3).astype(np.float32)
    mask_small = (spline_resample_volume(mask_pre.astype(np.float32), (size,) * 3) >= 0.5).astype(np.uint8)
    return TrainSample(small=small, label=int(kind), pre=pre, mask_small=mask_small, mask_pre=mask_pre)


def spheres_vs_cubes(n_cases=40, seed=0, pre_size=40, size=32, equal_volume=False):
    """Balanced list of ``(LabeledCase, TrainSample)`` pairs with alternating labels."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_cases):
        kind = i % 2
        sample = make_case(kind, rng, pre_size, size, equal_volume)
        out.append((LabeledCase(f"case{i:03d}", None, kind), sample))
    return out
