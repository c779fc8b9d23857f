from __future__ import annotations

import numpy as np

from ..errors import ParameterError
from .autograd import backward, leaf


def _leaves(params):
    return {name: leaf(value, name=name) for name, value in params.items()}


def _evaluate(f, params):
    return float(f(_leaves(params)).value)


def analytic_gradients(f, params):
    leaves = _leaves(params)
    return backward(f(leaves), leaves)


def _probe_counts(sizes, samples, stratified):
    if not stratified:
        return None
    counts = np.maximum(1, np.floor(samples * sizes / sizes.sum())).astype(int)
    return np.minimum(counts, sizes.astype(int))


def finite_diff_check(f, params, step=1e-4, samples=None, seed=0, analytic=None, stratified=False):
    """Largest relative disagreement between analytic and central-difference gradients.

    ``f`` maps ``{name: Node}`` to a scalar Node and ``params`` maps names to
    arrays (use float64).  With ``samples`` set, only that many randomly
    chosen scalar entries are probed; otherwise every entry is.  ``stratified``
    spreads the sample in proportion to tensor size but guarantees every
    tensor at least one distinct probe.  Passing
    ``analytic`` checks a supplied gradient dict instead of running backward.

    The relative error of one entry is
    ``|a - fd| / max(|a|, |fd|, 1e-8)``.
    """
    if step <= 0:
        raise ParameterError(f"step must be positive, got {step}")
    params = {k: np.array(v, copy=True) for k, v in params.items()}
    if analytic is None:
        analytic = analytic_gradients(f, params)

    names = list(params)
    if samples is None:
        probes = [(n, i) for n in names for i in range(params[n].size)]
    else:
        rng = np.random.default_rng(seed)
        sizes = np.array([params[n].size for n in names], dtype=float)
        counts = _probe_counts(sizes, samples, stratified)
        if counts is None:
            which = rng.choice(len(names), size=samples, p=sizes / sizes.sum())
            probes = [(names[k], int(rng.integers(params[names[k]].size))) for k in which]
        else:
            probes = [(n, int(i)) for n, c in zip(names, counts)
                      for i in rng.choice(params[n].size, size=c, replace=False)]

    worst = 0.0
    for name, idx in probes:
        flat = params[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + step
        up = _evaluate(f, params)
        flat[idx] = orig - step
        down = _evaluate(f, params)
        flat[idx] = orig
        fd = (up - down) / (2.0 * step)
        a = float(np.asarray(analytic[name]).reshape(-1)[idx])
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst
