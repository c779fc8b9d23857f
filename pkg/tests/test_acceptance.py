"""The nine acceptance criteria, one test each, at their stated tolerances.

Run with ``pytest tests/test_acceptance.py``; the terminal summary prints
one PASS/FAIL line per criterion.
"""
import time

import numpy as np
import pytest

from ct3d import augment as A
from ct3d import train_eval as T
from ct3d.core import autograd as ag
from ct3d.core.gradcheck import finite_diff_check
from ct3d.core.ops import conv3d, depthwise_conv3d
from ct3d.formats import ntc_from_bytes, ntc_to_bytes, vox_from_bytes, vox_to_bytes
from ct3d.inflate import InflationSpec, depth_profile, inflate
from ct3d.model import ModelConfig, build_model, forward_features, parameter_shapes
from ct3d.resample import sample_positions, spline_resample_1d
from ct3d.synthetic import spheres_vs_cubes

from test_model import closed_form_count
from oracles import brute_conv3d, brute_depthwise, dense_gaussian_smooth, natural_spline_dense


@pytest.mark.acceptance(1, "inflation invariants")
def test_criterion_1_inflation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    for mode in ("full", "1g", "2g"):
        for _ in range(100):
            shape = tuple(rng.integers(1, 5, 2)) + tuple(rng.integers(1, 8, 2))
            D = int(rng.integers(1, 9))
            K = rng.standard_normal(shape)
            out = inflate(K, InflationSpec(mode, D))
            assert out.shape == shape + (D,)
            assert abs(np.linalg.norm(out) - np.linalg.norm(K)) <= 1e-5
            if mode == "full":
                for d in range(D):
                    assert np.array_equal(out[..., d], out[..., 0])
            if mode == "1g":
                prof = depth_profile(D)
                ratio = out / np.where(K == 0, 1, K)[..., None]
                big = np.abs(K) > 1e-6
                for d in range(D):
                    np.testing.assert_allclose(ratio[..., d][big] / prof[d], ratio[..., 0][big] / prof[0], rtol=1e-9)
            if D == 1 and mode in ("full", "1g"):
                np.testing.assert_allclose(out[..., 0], K, rtol=1e-12, atol=1e-15)
    assert time.perf_counter() - t0 < 5.0


def _random_point(model, seed):
    """Generic parameter point: weights, biases and LayerNorm shifts N(0, 0.1^2), LayerNorm scales 1 + N(0, 0.1^2)."""
    rng = np.random.default_rng(seed)
    for k, v in model.params.items():
        scale = 1.0 if k.endswith("norm.weight") else 0.0
        model.params[k] = scale + 0.1 * rng.standard_normal(v.shape)
    return model


@pytest.mark.acceptance(2, "end-to-end gradient oracle (toy model, 64-bit)")
def test_criterion_2_gradients():
    t0 = time.perf_counter()
    cfg = ModelConfig.toy(heads=("classification", "segmentation"), num_classes=4)
    model = _random_point(build_model(cfg, 0, dtype=np.float64), 7)
    rng = np.random.default_rng(3)
    x = rng.random((2, 1, 32, 32, 32))
    y = np.array([2, 0])
    mask = (rng.random((2, 32, 32, 32)) > 0.5).astype(int)
    weights = T.ClassWeights([0.5, 1.5, 1.0, 1.0])

    def cls_loss(p):
        return T.balanced_ce(model.class_logits(model.features(x, p), p), y, weights)

    def multitask(p):
        f = model.features(x, p)
        cls = T.balanced_ce(model.class_logits(f, p), y, weights)
        return T.multitask_loss(cls, T.seg_loss(model.mask_logits(f, p, (32, 32, 32)), mask), 1.0)

    errors = {}
    for name, f in (("balanced_ce", cls_loss), ("multitask", multitask)):
        errors[name] = finite_diff_check(f, model.params, step=1e-4, samples=240, seed=11, stratified=True)
    print("max relative error", errors)
    assert max(errors.values()) < 1e-4
    assert time.perf_counter() - t0 < 300


@pytest.mark.acceptance(3, "convolution and blur oracles (32-bit)")
def test_criterion_3_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    for _ in range(20):
        ci, co = rng.integers(1, 4, 2)
        k = tuple(int(a) for a in rng.integers(1, 4, 3))
        s = tuple(int(a) for a in rng.integers(1, 3, 3))
        p = tuple(int(a) for a in rng.integers(0, 2, 3))
        x = rng.standard_normal((ci, *rng.integers(4, 8, 3))).astype(np.float32)
        w = rng.standard_normal((ci, co, *k)).astype(np.float32)
        ref = brute_conv3d(x.astype(np.float64), w.astype(np.float64), s, p)
        assert np.abs(conv3d(x, w, s, p) - ref).max() <= 1e-5
    for _ in range(20):
        c = int(rng.integers(1, 4))
        k = tuple(int(a) for a in rng.integers(1, 4, 3))
        p = tuple(a // 2 for a in k)
        x = rng.standard_normal((c, *rng.integers(4, 8, 3))).astype(np.float32)
        w = rng.standard_normal((c, 1, *k)).astype(np.float32)
        ref = brute_depthwise(x.astype(np.float64), w.astype(np.float64), (1, 1, 1), p)
        assert np.abs(depthwise_conv3d(x, w, 1, p) - ref).max() <= 1e-5
    for _ in range(20):
        vol = rng.standard_normal(tuple(rng.integers(4, 10, 3))).astype(np.float32)
        sigma = float(rng.uniform(0.5, 1.5))
        out = A.gaussian_blur(vol, sigma)
        assert out.dtype == np.float32
        assert np.abs(out - dense_gaussian_smooth(vol.astype(np.float64), sigma)).max() <= 1e-5
    assert time.perf_counter() - t0 < 60


@pytest.mark.acceptance(4, "natural spline oracle")
def test_criterion_4_spline():
    rng = np.random.default_rng(404)
    for _ in range(50):
        n = int(rng.integers(2, 40))
        m = int(rng.integers(2, 60))
        y = rng.standard_normal(n)
        ref = natural_spline_dense(y, sample_positions(n, m))
        assert np.abs(spline_resample_1d(y, m) - ref).max() <= 1e-6
    for n, m in ((5, 17), (30, 7), (12, 12)):
        np.testing.assert_allclose(spline_resample_1d(np.full(n, 2.5), m), 2.5, atol=1e-5)
        line = 0.3 * np.arange(n) - 1.0
        np.testing.assert_allclose(spline_resample_1d(line, m), 0.3 * sample_positions(n, m) - 1.0, atol=1e-5)
    y = rng.standard_normal(23)
    np.testing.assert_allclose(spline_resample_1d(y, 23), y, atol=1e-6)


@pytest.mark.acceptance(5, "augmentation invariants and branch frequencies")
def test_criterion_5_augmentation():
    rng = np.random.default_rng(505)
    big = rng.random((40, 40, 40)).astype(np.float32)
    small = rng.random((32, 32, 32)).astype(np.float32)
    plan = A.AugmentPlan(pre_size=40, crop_size=32, seed=17)
    for vid in range(5):
        assert A.apply_pipeline(big, small, plan, vid).tobytes() == A.apply_pipeline(big, small, plan, vid).tobytes()
    cube = rng.standard_normal((6, 6, 6))
    for seed in range(10):
        r = np.random.default_rng(seed)
        for out in (A.orient90(cube, r, prob=1.0), A.random_flip(cube, r, prob=0.5)):
            np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(cube.ravel()))
    np.testing.assert_array_equal(A.elastic_deform(small, rng, alpha=0.0), small)

    n = 1000
    draws = [A.draw_params(A.AugmentPlan(seed=2718), v) for v in range(n)]
    for p, observed in ((0.5, sum(d.crop for d in draws)), (0.25, sum(d.turns is not None for d in draws)),
                        (0.5, sum(d.elastic for d in draws))):
        sd = np.sqrt(n * p * (1 - p))
        assert abs(observed - n * p) <= 3 * sd, (p, observed)


@pytest.mark.acceptance(6, "stage schedule 56/28/14/7 and 62 -> {12,12,12,13,13}")
def test_criterion_6_structure():
    default = ModelConfig()
    assert default.stage_depths == (3, 3, 9, 3) and default.stem_patch == 4
    assert default.stage_sides(224) == [56, 28, 14, 7]
    assert sum(int(np.prod(s)) for s in parameter_shapes(default).values()) == closed_form_count(default)
    narrow = build_model(ModelConfig(stage_channels=(2, 2, 2, 2)), 0)
    feats = forward_features(narrow, np.zeros((1, 224, 224, 224), np.float32))
    assert [f.shape[1:] for f in feats] == [(56,) * 3, (28,) * 3, (14,) * 3, (7,) * 3]
    for seed in range(5):
        cases = [(f"mod{i}", 1) for i in range(62)] + [(f"oth{i}", i % 3 and 2 or 0) for i in range(40)]
        fa = T.stratified_kfold(cases, 5, seed)
        per = sorted(sum(1 for c in fa.members(f) if c.startswith("mod")) for f in range(5))
        assert per == [12, 12, 12, 13, 13]


@pytest.mark.acceptance(7, "ensemble, balanced CE and EMA reductions")
def test_criterion_7_reductions():
    model = build_model(ModelConfig.toy(), 5)
    vol = np.random.default_rng(0).random((32, 32, 32)).astype(np.float32)
    logits = T.model_logits(model, vol)[0].astype(np.float64)
    e = np.exp(logits - logits.max())
    out = T.ensemble_predict([model], vol)
    np.testing.assert_array_equal(out.probabilities, e / e.sum())
    assert out.label == int(np.argmax(logits))

    rng = np.random.default_rng(1)
    z = rng.standard_normal((32, 4))
    y = rng.integers(0, 4, 32)
    assert T.balanced_ce(z, y, np.ones(4)).value.tobytes() == T.cross_entropy(z, y).value.tobytes()

    w = {"p": rng.standard_normal(50)}
    s0 = rng.standard_normal(50)
    for beta in (0.5, 0.9, 0.999):
        state = T.EmaState(beta, {"p": s0.copy()})
        for n in range(1, 201):
            T.ema_update(state, w)
            assert np.abs(np.abs(state.shadow["p"] - w["p"]) - beta ** n * np.abs(s0 - w["p"])).max() <= 1e-6


SMOKE_HYPER = dict(lr=0.02, momentum=0.9, steps=200, batch=8, ema_decay=0.95, schedule="cosine")


@pytest.mark.acceptance(8, "synthetic end-to-end smoke test")
def test_criterion_8_smoke():
    t0 = time.perf_counter()
    data = spheres_vs_cubes(40, seed=0)
    cases = [c for c, _ in data]
    samples = {c.case_id: s for c, s in data}
    folds = T.stratified_kfold(cases, 5, seed=0)
    plan = A.AugmentPlan(pre_size=40, crop_size=32, seed=1)
    cfg = ModelConfig.toy(num_classes=2)
    results = T.cross_validate(lambda f: build_model(cfg, f), samples, folds, plan, T.TrainHyper(**SMOKE_HYPER))
    ema_models = [r.ema_model() for r in results]

    held_out = [s for _, s in spheres_vs_cubes(100, seed=2000)]
    pred = [T.ensemble_predict(ema_models, s.small).label for s in held_out]
    macro, per = T.macro_f1(pred, [s.label for s in held_out], 2)

    oof_pred, oof_true = [], []
    for f, model in enumerate(ema_models):
        for cid in folds.members(f):
            oof_pred.append(T.ensemble_predict([model], samples[cid].small).label)
            oof_true.append(samples[cid].label)
    oof = T.macro_f1(oof_pred, oof_true, 2)[0]
    elapsed = time.perf_counter() - t0
    print(f"held-out ensemble macro-F1 {macro:.3f} per-class {per}; out-of-fold macro-F1 {oof:.3f}; {elapsed:.0f}s")
    assert macro >= 0.9
    assert elapsed < 15 * 60


@pytest.mark.acceptance(9, "VOX1 and NTC1 byte-identical round trips")
def test_criterion_9_formats():
    rng = np.random.default_rng(909)
    for _ in range(20):
        vol = rng.standard_normal(tuple(rng.integers(1, 9, int(rng.integers(1, 5))))).astype(np.float32)
        raw = vox_to_bytes(vol)
        assert vox_to_bytes(vox_from_bytes(raw)) == raw
    for _ in range(20):
        entries = {}
        for j in range(int(rng.integers(1, 8))):
            rank = int(rng.integers(0, 5))
            entries[f"layer.{j}.w{rng.integers(1000)}"] = rng.standard_normal(tuple(rng.integers(1, 5, rank))).astype(np.float32)
        raw = ntc_to_bytes(entries)
        assert ntc_to_bytes(ntc_from_bytes(raw)) == raw
