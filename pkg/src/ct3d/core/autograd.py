"""Minimal reverse-mode differentiation over numpy arrays.

A ``Node`` records its value, the nodes it was computed from, and a closure
that maps the output gradient to one gradient per parent.  Graph ops work on
batched tensors ``(N, C, X, Y, Z)``; channel axis is always 1.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from ..errors import ContractError, ShapeError
from . import ops


class Node:
    __slots__ = ("value", "parents", "backward_fn", "grad", "name", "trainable")

    def __init__(self, value, parents=(), backward_fn=None, name=None, trainable=False):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.grad = None
        self.name = name
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape}, dtype={self.value.dtype})"


def leaf(value, name=None, trainable=True):
    return Node(np.asarray(value), name=name, trainable=trainable)


def constant(value):
    return Node(np.asarray(value), trainable=False)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    out = a.value + b.value

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(out, (a, b), bw)


def scale(a, c):
    c = float(c)

    def bw(g):
        return (g * c,)

    return Node(a.value * c, (a,), bw)


def multiply(a, b):
    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Node(a.value * b.value, (a, b), bw)


def total(a):
    def bw(g):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return Node(np.asarray(a.value.sum()), (a,), bw)


def mean(a):
    n = a.value.size

    def bw(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return Node(np.asarray(a.value.mean()), (a,), bw)


def _bias_shape(ndim):
    return (1, -1) + (1,) * (ndim - 2)


def conv3d(x, w, b=None, stride=1, padding=0):
    stride = ops.triple(stride)
    padding = ops.triple(padding)
    xp = ops.pad_spatial(x.value, padding)
    y = ops.conv3d(x.value, w.value, stride, padding)
    if b is not None:
        y = y + b.value.reshape(_bias_shape(y.ndim))

    def bw(g):
        g = np.ascontiguousarray(g)
        wv = np.ascontiguousarray(w.value)
        gx = ops.crop_spatial(kernels.conv3d_grad_input(g, wv, xp.shape, stride), padding)
        gw = kernels.conv3d_grad_weight(xp, g, wv.shape, stride)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Node(y, parents, bw)


def depthwise_conv3d(x, w, b=None, stride=1, padding=0):
    stride = ops.triple(stride)
    padding = ops.triple(padding)
    xp = ops.pad_spatial(x.value, padding)
    y = ops.depthwise_conv3d(x.value, w.value, stride, padding)
    if b is not None:
        y = y + b.value.reshape(_bias_shape(y.ndim))

    def bw(g):
        g = np.ascontiguousarray(g)
        wv = np.ascontiguousarray(w.value)
        gx = ops.crop_spatial(kernels.depthwise_grad_input(g, wv, xp.shape, stride), padding)
        gw = kernels.depthwise_grad_weight(xp, g, wv.shape, stride)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Node(y, parents, bw)


def pointwise(x, w, b=None):
    """Channel-mixing linear map along axis 1; ``w`` is ``(C_in, C_out)``."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"pointwise weight {w.shape} does not match {x.shape[1]} channels")
    xv = x.value
    y = np.moveaxis(np.tensordot(xv, w.value, axes=([1], [0])), -1, 1)
    if b is not None:
        y = y + b.value.reshape(_bias_shape(y.ndim))
    y = np.ascontiguousarray(y)

    def bw(g):
        gx = np.moveaxis(np.tensordot(g, w.value, axes=([1], [1])), -1, 1)
        other = [0] + list(range(2, g.ndim))
        gw = np.tensordot(xv, g, axes=(other, other))
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g.sum(axis=tuple(other)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Node(y, parents, bw)


def layer_norm(x, gamma, beta, eps=1e-6):
    xv = x.value
    xhat, rstd = ops.layer_norm_stats(xv, eps, axis=1)
    cs = _bias_shape(xv.ndim)
    y = xhat * gamma.value.reshape(cs) + beta.value.reshape(cs)
    other = tuple(a for a in range(xv.ndim) if a != 1)

    def bw(g):
        gxhat = g * gamma.value.reshape(cs)
        gx = rstd * (gxhat - gxhat.mean(axis=1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=other), g.sum(axis=other)

    return Node(y, (x, gamma, beta), bw)


def gelu(x):
    xv = x.value

    def bw(g):
        return (g * ops.gelu_grad(xv),)

    return Node(ops.gelu(xv), (x,), bw)


def spatial_mean(x):
    """Global average pool ``(N, C, X, Y, Z) -> (N, C)``."""
    n = int(np.prod(x.shape[2:]))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None, None] / n, x.shape).copy(),)

    return Node(x.value.mean(axis=(2, 3, 4)), (x,), bw)


def trilinear_resize(x, target):
    target = ops.triple(target, "target")
    if tuple(x.shape[2:]) == target:
        return x
    mats = ops.resize_matrices(x.shape[2:], target, x.dtype)
    y = ops.apply_along_spatial(x.value, mats).astype(x.dtype, copy=False)

    def bw(g):
        return (ops.apply_along_spatial(g, [None if A is None else A.T for A in mats]),)

    return Node(y, (x,), bw)


def concat(nodes, axis=1):
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return Node(np.concatenate([n.value for n in nodes], axis=axis), nodes, bw)


def cross_entropy(logits, labels, class_weights=None):
    """Mean over all positions of ``w[y] * -log softmax(logits)[y]`` (class axis 1).

    ``logits`` is ``(N, K, ...)`` and ``labels`` integer ``(N, ...)``.  With
    ``class_weights`` omitted every weight is exactly 1.
    """
    lv = logits.value
    labels = np.asarray(labels)
    K = lv.shape[1]
    if labels.shape != lv.shape[:1] + lv.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {lv.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ContractError(f"label out of range [0, {K})")
    logp = ops.log_softmax(lv, axis=1)
    picked = np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
    nll = -picked
    if class_weights is not None:
        wy = np.asarray(class_weights, dtype=lv.dtype)[labels]
        nll = wy * nll
    else:
        wy = None
    loss = np.asarray(nll.mean())
    count = nll.size

    def bw(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        grad = grad - onehot
        if wy is not None:
            grad = grad * wy[:, None]
        return (grad * (g / count),)

    return Node(loss, (logits,), bw)


def backward(loss, params=None):
    """Reverse sweep from a scalar ``loss``.

    Returns ``{name: gradient}`` for every trainable named leaf reached, plus
    zero gradients for any leaf in ``params`` the loss does not depend on.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.value)}
    leaf_grads = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaf_grads[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if parent.backward_fn is None and not parent.trainable:
                continue
            if pg.dtype != parent.value.dtype:
                pg = pg.astype(parent.value.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    result = {}
    for node in order:
        if node.backward_fn is None and node.trainable and node.name is not None:
            g = leaf_grads.get(id(node))
            if g is None:
                g = np.zeros_like(node.value)
            node.grad = g
            result[node.name] = np.asarray(g, dtype=node.value.dtype)
    if params is not None:
        for name, node in params.items():
            value = node.value if isinstance(node, Node) else np.asarray(node)
            result.setdefault(name, np.zeros_like(value))
    return result
