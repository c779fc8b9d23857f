"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 24]

Both backends are imported directly, so the environment switch does not
matter here.  Each case also prints the largest disagreement between the
two, relative to the output scale.
"""
import argparse
import timeit

import numpy as np

from ct3d import _kernels_py

try:
    from ct3d import _kernels
except ImportError:
    _kernels = None


def cases(size, dtype):
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((2, 8, size + 2, size + 2, size + 2)).astype(dtype)
    w = rng.standard_normal((8, 16, 3, 3, 3)).astype(dtype)
    y = _kernels_py.conv3d_forward(xp, w, (1, 1, 1))
    dpx = rng.standard_normal((2, 16, size + 6, size + 6, size + 6)).astype(dtype)
    dw = rng.standard_normal((16, 1, 7, 7, 7)).astype(dtype)
    dy = _kernels_py.depthwise_forward(dpx, dw, (1, 1, 1))
    rows = rng.standard_normal((size * size, 4 * size)).astype(dtype)
    padded = rng.standard_normal((size * size, 4 * size + 30)).astype(dtype)
    kern = np.exp(-0.5 * (np.arange(31) - 15.0) ** 2 / 25.0).astype(dtype)
    return [
        ("conv3d_forward", "conv3d_forward", (xp, w, (1, 1, 1))),
        ("conv3d_grad_input", "conv3d_grad_input", (y, w, xp.shape, (1, 1, 1))),
        ("conv3d_grad_weight", "conv3d_grad_weight", (xp, y, w.shape, (1, 1, 1))),
        ("depthwise_forward 7^3", "depthwise_forward", (dpx, dw, (1, 1, 1))),
        ("depthwise_grad_input", "depthwise_grad_input", (dy, dw, dpx.shape, (1, 1, 1))),
        ("depthwise_grad_weight", "depthwise_grad_weight", (dpx, dy, dw.shape, (1, 1, 1))),
        ("spline moments", "natural_spline_moments", (rows,)),
        ("correlate rows", "correlate_rows", (padded, kern)),
    ]


def best(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=24)
    ap.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; only numpy timings are shown")
    print(f"{'kernel':24s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s} {'rel diff':>10s}")
    for label, name, call in cases(args.size, np.dtype(args.dtype)):
        t_py = best(getattr(_kernels_py, name), call, args.repeat) * 1e3
        if _kernels is None:
            print(f"{label:24s} {t_py:10.2f}")
            continue
        fast = getattr(_kernels, name)
        t_cy = best(fast, call, args.repeat) * 1e3
        ref = np.asarray(getattr(_kernels_py, name)(*call), np.float64)
        diff = float(np.max(np.abs(np.asarray(fast(*call), np.float64) - ref)) / max(np.max(np.abs(ref)), 1e-30))
        print(f"{label:24s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x {diff:10.2e}")


if __name__ == "__main__":
    main()
