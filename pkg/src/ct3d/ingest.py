"""Case ingestion (slice stacks or VOX1 files) and the resampling cache."""
from __future__ import annotations

import hashlib
import logging
import os
import warnings
from collections import Counter

import numpy as np
from PIL import Image, UnidentifiedImageError

from .augment import HU_WINDOW, normalize_hu
from .errors import IngestionError
from .formats import load_vox, save_vox
from .resample import spline_resample_volume

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".pgm", ".bmp")
HU_INTERCEPT = -1024.0
CACHE_VERSION = "1"


class InconsistentSlicesWarning(UserWarning):
    pass


def _read_slice(path, intercept):
    """Slice as HU-normalized float32.  8-bit images are taken as already
    windowed to [0, 255]; 16-bit ones as stored HU offset by ``-intercept``.
    """
    try:
        with Image.open(path) as img:
            mode = img.mode
            arr = np.asarray(img)
    except (UnidentifiedImageError, OSError) as exc:
        raise IngestionError(f"cannot read slice {path}: {exc}") from None
    if mode == "L":
        return arr.astype(np.float32) / 255.0
    if mode in ("I;16", "I;16L", "I;16B", "I"):
        return normalize_hu(arr.astype(np.float64) + intercept).astype(np.float32)
    raise IngestionError(f"slice {path} is not 8/16-bit grayscale (mode {mode})")


def list_slices(directory):
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(IMAGE_SUFFIXES))
    return [os.path.join(directory, n) for n in names]


def stack_slices(paths, intercept=HU_INTERCEPT):
    """Stack slices along z after dropping those whose resolution differs from the majority."""
    if not paths:
        raise IngestionError("no slice images found")
    slices = [_read_slice(p, intercept) for p in paths]
    shapes = [s.shape for s in slices]
    majority, _ = Counter(shapes).most_common(1)[0]
    dropped = [i for i, s in enumerate(shapes) if s != majority]
    if dropped:
        msg = f"discarded {len(dropped)} slice(s) with resolution != {majority}: indices {dropped}"
        log.warning(msg)
        warnings.warn(msg, InconsistentSlicesWarning, stacklevel=3)
    kept = [s for s in slices if s.shape == majority]
    if len(kept) < 2:
        raise IngestionError(f"need at least 2 consistent slices, found {len(kept)}")
    return np.stack(kept, axis=-1)


def ingest_case(path, intercept=HU_INTERCEPT):
    """Normalized volume (X, Y, Z) with intensities in [0, 1].

    ``path`` is a directory of slice images (lexicographic order gives z)
    or a VOX1 file, which is taken to hold an already normalized volume.
    """
    if os.path.isdir(path):
        return stack_slices(list_slices(path), intercept)
    if not os.path.exists(path):
        raise IngestionError(f"no such case: {path}")
    vol = load_vox(path)
    if vol.ndim != 3:
        raise IngestionError(f"{path}: expected a 3-D volume, got rank {vol.ndim}")
    if min(vol.shape) < 2:
        raise IngestionError(f"{path}: volume {vol.shape} is too thin")
    return vol


def ingest_hu(hu, window=HU_WINDOW):
    """Normalize a raw Hounsfield-unit array the same way slice stacks are."""
    return normalize_hu(np.asarray(hu, dtype=np.float64), window).astype(np.float32)


# cache

def cache_dir(override=None):
    if override:
        return os.fspath(override)
    env = os.environ.get("CT3D_CACHE_DIR")
    if env:
        return env
    return os.path.join(os.path.expanduser("~"), ".cache", "ct3d")


def content_key(vol):
    arr = np.ascontiguousarray(vol, dtype=np.float32)
    h = hashlib.sha256()
    h.update(CACHE_VERSION.encode())
    h.update(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()[:32]


def precompute(vol, sizes=(256, 224), directory=None):
    """Resample ``vol`` to each cubic size, caching VOX1 files by content hash.

    Returns ``(paths, hits)``: the file for each size and whether it was
    already cached.
    """
    root = cache_dir(directory)
    key = content_key(vol)
    paths, hits = {}, {}
    for size in sizes:
        path = os.path.join(root, f"{key}_{size}.vox")
        hit = os.path.exists(path)
        if hit:
            log.info("cache hit %s", path)
        else:
            out = spline_resample_volume(np.asarray(vol, dtype=np.float64), (size,) * 3)
            save_vox(path, out)
            log.info("cached %s", path)
        paths[size], hits[size] = path, hit
    return paths, hits


def load_resampled(vol, sizes=(256, 224), directory=None):
    paths, _ = precompute(vol, sizes, directory)
    return {s: load_vox(p) for s, p in paths.items()}
