"""Fast invariant and oracle checks runnable from an installed package (``ct3d selftest``).

The reference implementations here are deliberately naive loops and dense
solves so they share no code with the kernels they check.
"""
from __future__ import annotations

import math
import time
import traceback

import numpy as np

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


def _loop_conv(x, w, stride):
    Ci, X, Y, Z = x.shape
    _, Co, H, W, D = w.shape
    out = np.zeros((Co, (X - H) // stride + 1, (Y - W) // stride + 1, (Z - D) // stride + 1))
    for o in range(Co):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                for k in range(out.shape[3]):
                    patch = x[:, i * stride:i * stride + H, j * stride:j * stride + W, k * stride:k * stride + D]
                    out[o, i, j, k] = np.sum(patch * w[:, o])
    return out


@check
def conv_matches_loops():
    from .core.ops import conv3d, depthwise_conv3d

    rng = np.random.default_rng(0)
    for stride in (1, 2):
        x = rng.standard_normal((2, 6, 5, 7))
        w = rng.standard_normal((2, 3, 3, 2, 3))
        assert np.abs(conv3d(x, w, stride) - _loop_conv(x, w, stride)).max() < 1e-10
    x = rng.standard_normal((3, 6, 6, 6))
    w = rng.standard_normal((3, 1, 3, 3, 3))
    ref = np.stack([_loop_conv(x[c:c + 1], w[c:c + 1], 1)[0] for c in range(3)])
    assert np.abs(depthwise_conv3d(x, w) - ref).max() < 1e-10


@check
def separable_blur_matches_dense():
    from .augment import gaussian_smooth

    rng = np.random.default_rng(1)
    vol = rng.standard_normal((5, 6, 7))
    sigma = 0.9
    r = math.ceil(3 * sigma)
    t = np.arange(-r, r + 1)
    g = np.exp(-t ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    dense = g[:, None, None] * g[None, :, None] * g[None, None, :]
    padded = np.pad(vol, r, mode="symmetric")
    ref = np.zeros_like(vol)
    for i in range(vol.shape[0]):
        for j in range(vol.shape[1]):
            for k in range(vol.shape[2]):
                ref[i, j, k] = np.sum(padded[i:i + 2 * r + 1, j:j + 2 * r + 1, k:k + 2 * r + 1] * dense)
    assert np.abs(gaussian_smooth(vol, sigma) - ref).max() < 1e-10


@check
def spline_matches_dense_solve():
    from .resample import spline_resample_1d

    rng = np.random.default_rng(2)
    y = rng.standard_normal(9)
    n, m = len(y), 14
    A = np.zeros((n, n))
    rhs = np.zeros(n)
    A[0, 0] = A[-1, -1] = 1.0
    for i in range(1, n - 1):
        A[i, i - 1:i + 2] = (1.0, 4.0, 1.0)
        rhs[i] = 6.0 * (y[i - 1] - 2 * y[i] + y[i + 1])
    M = np.linalg.solve(A, rhs)
    t = np.arange(m) * (n - 1) / (m - 1)
    i = np.minimum(np.floor(t).astype(int), n - 2)
    u = t - i
    ref = ((1 - u) * y[i] + u * y[i + 1]
           + ((1 - u) ** 3 - (1 - u)) * M[i] / 6 + (u ** 3 - u) * M[i + 1] / 6)
    assert np.abs(spline_resample_1d(y, m) - ref).max() < 1e-10


@check
def inflation_preserves_norm():
    from .inflate import InflationSpec, inflate

    rng = np.random.default_rng(3)
    K = rng.standard_normal((2, 3, 5, 5))
    for mode in ("full", "1g", "2g"):
        for D in (1, 4, 7):
            out = inflate(K, InflationSpec(mode, D))
            assert out.shape == K.shape + (D,)
            assert abs(np.linalg.norm(out) - np.linalg.norm(K)) < 1e-9
    full = inflate(K, InflationSpec("full", 4))
    assert all(np.array_equal(full[..., 0], full[..., d]) for d in range(4))


@check
def augmentation_determinism():
    from .augment import AugmentPlan, apply_pipeline, elastic_deform

    rng = np.random.default_rng(4)
    big = rng.random((20, 20, 20)).astype(np.float32)
    small = rng.random((16, 16, 16)).astype(np.float32)
    plan = AugmentPlan(pre_size=20, crop_size=16, elastic_sigma=4.0, seed=5)
    for vid in range(3):
        assert apply_pipeline(big, small, plan, vid).tobytes() == apply_pipeline(big, small, plan, vid).tobytes()
    assert np.array_equal(elastic_deform(small, rng, alpha=0.0), small)


@check
def stage_schedule():
    from .model import ModelConfig

    assert ModelConfig().stage_sides(224) == [56, 28, 14, 7]
    assert ModelConfig.toy().stage_sides(32) == [8, 4, 2, 1]


@check
def stratified_folds():
    from .train_eval import stratified_kfold

    cases = [(f"m{i}", 1) for i in range(62)] + [(f"s{i}", 2) for i in range(17)]
    fa = stratified_kfold(cases, 5, seed=0)
    counts = sorted(sum(1 for c, f in fa.folds.items() if f == k and c.startswith("m")) for k in range(5))
    assert counts == [12, 12, 12, 13, 13]


@check
def loss_reductions():
    from .train_eval import balanced_ce, cross_entropy

    rng = np.random.default_rng(6)
    logits = rng.standard_normal((7, 4))
    y = rng.integers(0, 4, 7)
    a = balanced_ce(logits, y, np.ones(4)).value
    b = cross_entropy(logits, y).value
    assert a.tobytes() == b.tobytes()
    two = balanced_ce(np.zeros((1, 2)), [0], [2.0, 1.0]).value
    assert abs(float(two) - 2 * math.log(2)) < 1e-12


@check
def ema_contraction():
    from .train_eval import EmaState, ema_update

    w = {"a": np.array([1.5, -2.0])}
    state = EmaState(0.9, {"a": np.array([0.0, 0.0])})
    for _ in range(25):
        ema_update(state, w)
    gap = np.abs(state.shadow["a"] - w["a"])
    assert np.abs(gap - 0.9 ** 25 * np.abs(w["a"])).max() < 1e-9


@check
def ensemble_and_f1():
    from .train_eval import ensemble_probabilities, macro_f1

    logits = np.array([0.3, -1.0, 2.0])
    single = ensemble_probabilities([logits])
    e = np.exp(logits - logits.max())
    assert np.abs(single - e / e.sum()).max() < 1e-15
    both = ensemble_probabilities([[50.0, -50.0], [-50.0, 50.0]])
    assert np.allclose(both, 0.5) and int(np.argmax(both)) == 0
    assert macro_f1([0, 0, 0, 0], [0, 1, 2, 3], 4)[0] == 0.1


@check
def format_roundtrips():
    from .formats import ntc_from_bytes, ntc_to_bytes, vox_from_bytes, vox_to_bytes

    rng = np.random.default_rng(7)
    vol = rng.standard_normal((3, 4, 5)).astype(np.float32)
    raw = vox_to_bytes(vol)
    assert vox_to_bytes(vox_from_bytes(raw)) == raw
    entries = {"a.weight": rng.standard_normal((2, 3)).astype(np.float32), "b": np.float32(1.5)}
    raw = ntc_to_bytes(entries)
    assert ntc_to_bytes(ntc_from_bytes(raw)) == raw


@check
def gradients_match_differences():
    from .core import autograd as ag
    from .core.gradcheck import finite_diff_check

    rng = np.random.default_rng(8)
    x = ag.constant(rng.standard_normal((1, 2, 6, 6, 6)))
    params = {"w": 0.3 * rng.standard_normal((2, 3, 2, 2, 2)), "b": 0.1 * rng.standard_normal(3),
              "g": 1 + 0.1 * rng.standard_normal(3), "beta": 0.1 * rng.standard_normal(3),
              "fc": rng.standard_normal((3, 2))}

    def f(p):
        h = ag.conv3d(x, p["w"], p["b"], stride=2)
        h = ag.gelu(ag.layer_norm(h, p["g"], p["beta"], 1e-6))
        return ag.cross_entropy(ag.pointwise(ag.spatial_mean(h), p["fc"]), np.array([1]))

    assert finite_diff_check(f, params, step=1e-5) < 1e-6


def run(verbose=True):
    """Run every check; returns True when all pass."""
    ok = True
    for fn in CHECKS:
        t = time.perf_counter()
        try:
            fn()
            status = "PASS"
        except Exception:  # noqa: BLE001
            status = "FAIL"
            ok = False
            if verbose:
                traceback.print_exc()
        if verbose:
            print(f"{status}\t{fn.__name__}\t{time.perf_counter() - t:.2f}s")
    return ok
