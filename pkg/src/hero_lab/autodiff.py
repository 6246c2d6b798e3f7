"""Reverse-mode differentiation over dense float64 numpy arrays.

Ops build a graph of Node objects when any input is a Node; with plain
ndarray inputs they compute eagerly and return an ndarray, so the same
model code serves both traced training passes and fast inference.

Determinism: node creation order is a topological order of the graph, and
backward() walks it in reverse with a fixed accumulation order, so running
backward twice on the same record yields bit-identical gradients.

Second-order information is obtained exclusively through hvp_fd, a forward
finite difference of two first-order gradients on the same batch; there is
no tape-of-tape machinery.

The module keeps per-purpose counters of forward traces and backward
passes (see tape_purpose) so optimizer step costs can be asserted in tests
instead of trusted.
"""

from __future__ import annotations

import collections
import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import HeroLabError, ShapeError

Array = np.ndarray
# Gradient sets are plain dicts keyed by parameter name, values float64
# arrays with the parameter's shape.
GradientSet = dict[str, np.ndarray]


class Node:
    """One value in a traced computation.

    ``parents`` holds the op inputs (Nodes or plain arrays); ``vjp`` maps an
    upstream gradient to per-parent gradients, aligned with ``parents``.
    """

    __slots__ = ("value", "parents", "vjp", "order")
    _ids = itertools.count()

    def __init__(self, value, parents=(), vjp=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.order = next(Node._ids)

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(shape={np.shape(self.value)}, order={self.order})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _value(x):
    return x.value if isinstance(x, Node) else x


def _tracing(*xs) -> bool:
    return any(isinstance(x, Node) for x in xs)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    av, bv = _value(a), _value(b)
    out = av + bv
    if not _tracing(a, b):
        return out

    def vjp(g):
        return _unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))

    return Node(out, (a, b), vjp)


def sub(a, b):
    av, bv = _value(a), _value(b)
    out = av - bv
    if not _tracing(a, b):
        return out

    def vjp(g):
        return _unbroadcast(g, np.shape(av)), _unbroadcast(-g, np.shape(bv))

    return Node(out, (a, b), vjp)


def mul(a, b):
    av, bv = _value(a), _value(b)
    out = av * bv
    if not _tracing(a, b):
        return out

    def vjp(g):
        return _unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))

    return Node(out, (a, b), vjp)


def neg(a):
    av = _value(a)
    out = -av
    if not _tracing(a):
        return out
    return Node(out, (a,), lambda g: (-g,))


def matmul(a, b):
    """Matrix product for 1-D/2-D operands, mirroring numpy ``@``."""
    av, bv = _value(a), _value(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {av.shape} @ {bv.shape}")
    out = av @ bv
    if not _tracing(a, b):
        return out

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g * bv, g * av

    return Node(out, (a, b), vjp)


def relu(a):
    av = _value(a)
    out = np.maximum(av, 0.0)
    if not _tracing(a):
        return out
    # subgradient at exactly 0 is 0: the mask is strict
    mask = av > 0

    def vjp(g):
        return (g * mask,)

    return Node(out, (a,), vjp)


def reshape(a, shape):
    av = _value(a)
    out = av.reshape(shape)
    if not _tracing(a):
        return out
    orig = av.shape

    def vjp(g):
        return (g.reshape(orig),)

    return Node(out, (a,), vjp)


def _reduction_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None):
    av = _value(a)
    out = av.sum(axis=axis)
    if not _tracing(a):
        return out
    axes = _reduction_axes(axis, av.ndim)
    orig = av.shape

    def vjp(g):
        ge = np.asarray(g)
        for ax in sorted(axes):
            ge = np.expand_dims(ge, ax)
        return (np.broadcast_to(ge, orig).copy(),)

    return Node(out, (a,), vjp)


def reduce_mean(a, axis=None):
    av = _value(a)
    axes = _reduction_axes(axis, av.ndim)
    count = 1
    for ax in axes:
        count *= av.shape[ax]
    out = av.mean(axis=axis)
    if not _tracing(a):
        return out
    orig = av.shape

    def vjp(g):
        ge = np.asarray(g) / count
        for ax in sorted(axes):
            ge = np.expand_dims(ge, ax)
        return (np.broadcast_to(ge, orig).copy(),)

    return Node(out, (a,), vjp)


def conv2d(x, w, stride: int = 1, pad: int = 0):
    """2-D convolution, NCHW layout, square kernel, no dilation."""
    xv, wv = _value(x), _value(w)
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {xv.shape}, {wv.shape}")
    B, C, H, W = xv.shape
    OC, IC, KH, KW = wv.shape
    if IC != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, kernel expects {IC}")
    Ho = (H + 2 * pad - KH) // stride + 1
    Wo = (W + 2 * pad - KW) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {xv.shape}")
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    win = np.lib.stride_tricks.sliding_window_view(xp, (KH, KW), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, KH, KW)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * KH * KW)
    wmat = wv.reshape(OC, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, OC).transpose(0, 3, 1, 2)
    if not _tracing(x, w):
        return np.ascontiguousarray(out)

    def vjp(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, OC)
        grad_w = (gcols.T @ cols).reshape(wv.shape)
        gx_win = (gcols @ wmat).reshape(B, Ho, Wo, C, KH, KW).transpose(0, 3, 1, 2, 4, 5)
        grad_xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
        for i in range(KH):
            for j in range(KW):
                grad_xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gx_win[..., i, j]
        grad_x = grad_xp[:, :, pad : pad + H, pad : pad + W] if pad else grad_xp
        return grad_x, grad_w

    return Node(np.ascontiguousarray(out), (x, w), vjp)


def _bn_layout(xv):
    if xv.ndim == 2:
        return (0,), (1, -1)
    if xv.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeError(f"batch normalization expects 2-D or 4-D input, got {xv.shape}")


def batchnorm_train(x, scale, shift, eps: float = 1e-5):
    """Training-mode batch normalization.

    Normalizes by the current batch's mean and biased variance and returns
    ``(out, mean, var)`` so the caller can update running statistics and
    reuse the same normalization for a frozen second pass.
    """
    xv, sv, bv = _value(x), _value(scale), _value(shift)
    axes, pshape = _bn_layout(xv)
    if xv.shape[0] == 1:
        raise ShapeError("batch normalization in training mode needs batch size >= 2 "
                         "(batch variance is undefined for a single sample)")
    m = xv.mean(axis=axes)
    v = xv.var(axis=axes)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (xv - m.reshape(pshape)) * inv.reshape(pshape)
    out = sv.reshape(pshape) * xhat + bv.reshape(pshape)
    if not _tracing(x, scale, shift):
        return out, m, v

    def vjp(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gxhat = g * sv.reshape(pshape)
        mean_g = gxhat.mean(axis=axes).reshape(pshape)
        mean_gx = (gxhat * xhat).mean(axis=axes).reshape(pshape)
        gx = inv.reshape(pshape) * (gxhat - mean_g - xhat * mean_gx)
        return gx, gscale, gshift

    return Node(out, (x, scale, shift), vjp), m, v


def batchnorm_fixed(x, scale, shift, mean, var, eps: float = 1e-5):
    """Batch normalization with externally supplied (constant) statistics."""
    xv, sv, bv = _value(x), _value(scale), _value(shift)
    axes, pshape = _bn_layout(xv)
    inv = 1.0 / np.sqrt(np.asarray(var) + eps)
    xhat = (xv - np.asarray(mean).reshape(pshape)) * inv.reshape(pshape)
    out = sv.reshape(pshape) * xhat + bv.reshape(pshape)
    if not _tracing(x, scale, shift):
        return out

    def vjp(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gx = g * (sv * inv).reshape(pshape)
        return gx, gscale, gshift

    return Node(out, (x, scale, shift), vjp)


def cross_entropy_with_logits(logits, labels):
    """Mean cross-entropy of integer ``labels`` under ``logits`` rows.

    Computed through a shifted log-sum-exp so large logits cannot
    overflow. ``labels`` is a constant; only logits receive a gradient.
    """
    lv = _value(logits)
    y = np.asarray(labels)
    if lv.ndim != 2:
        raise ShapeError(f"cross-entropy expects logits of shape (batch, classes), got {lv.shape}")
    B = lv.shape[0]
    if B == 0:
        raise ShapeError("cross-entropy on an empty batch")
    if y.shape != (B,):
        raise ShapeError(f"labels shape {y.shape} does not match batch size {B}")
    m = lv.max(axis=1, keepdims=True)
    z = lv - m
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = -logp[np.arange(B), y].mean()
    if not _tracing(logits):
        return out

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(B), y] -= 1.0
        return (p * (np.asarray(g) / B),)

    return Node(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# records, forward/backward, pass counters

_counts: collections.Counter = collections.Counter()
_purpose: list[str] = ["loss"]


@contextlib.contextmanager
def tape_purpose(label: str):
    """Tag forward traces / backward passes inside the block with ``label``."""
    _purpose.append(label)
    try:
        yield
    finally:
        _purpose.pop()


def reset_pass_counts():
    _counts.clear()


def pass_counts() -> dict[tuple[str, str], int]:
    """Copy of the (purpose, phase) -> count table since the last reset."""
    return dict(_counts)


@dataclass
class ComputationRecord:
    """A traced loss evaluation: scalar root, named trainable leaves, extras."""

    root: Node
    leaves: dict[str, Node]
    aux: dict[str, Any] = field(default_factory=dict)

    @property
    def loss(self) -> float:
        return float(self.root.value)


def forward(model_fn: Callable, params, batch=None) -> ComputationRecord:
    """Trace ``model_fn`` over the trainable entries of ``params``.

    ``model_fn(leaves, batch)`` receives a dict of leaf Nodes keyed by
    parameter name and returns a scalar Node, optionally paired with an
    aux dict.
    """
    leaves = {e.name: Node(e.value) for e in params if e.trainable}
    out = model_fn(leaves, batch)
    root, aux = out if isinstance(out, tuple) else (out, {})
    if not isinstance(root, Node):
        raise HeroLabError("model function did not produce a traced output")
    if np.ndim(root.value) != 0:
        raise ShapeError(f"loss root must be scalar, got shape {np.shape(root.value)}")
    _counts[(_purpose[-1], "forward")] += 1
    return ComputationRecord(root=root, leaves=leaves, aux=dict(aux))


def backward(record: ComputationRecord) -> GradientSet:
    """Gradients of the record's scalar root for every trainable leaf.

    Leaves the root does not reach get explicit zeros. Replaying the same
    record gives bit-identical results.
    """
    root = record.root
    if np.ndim(root.value) != 0:
        raise ShapeError(f"backward needs a scalar root, got shape {np.shape(root.value)}")
    seen: dict[int, Node] = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if isinstance(p, Node) and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    grads: dict[int, Array] = {id(root): np.asarray(1.0)}
    sinks: dict[int, Array] = {}
    for node in sorted(seen.values(), key=lambda n: n.order, reverse=True):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            sinks[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not isinstance(parent, Node) or pg is None:
                continue
            held = grads.get(id(parent))
            grads[id(parent)] = pg if held is None else held + pg
    _counts[(_purpose[-1], "backward")] += 1
    out: GradientSet = {}
    for name, leaf in record.leaves.items():
        g = sinks.get(id(leaf))
        out[name] = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=np.float64)
    return out


def hvp_fd(loss_fn: Callable, params, v: GradientSet, h: float,
           base_grads: GradientSet | None = None) -> GradientSet:
    """Hessian-vector product by forward finite difference of gradients.

    Returns (grad(loss)(W + h v) - grad(loss)(W)) / h where ``loss_fn``
    maps a parameter set to a ComputationRecord over a fixed batch. Pass
    ``base_grads`` to reuse an already computed gradient at W.
    """
    if not h > 0:
        raise HeroLabError(f"finite-difference step must be positive, got {h}")
    if base_grads is None:
        base_grads = backward(loss_fn(params))
    shifted = params.shifted(v, h)
    moved = backward(loss_fn(shifted))
    return {k: (moved[k] - base_grads[k]) / h for k in base_grads}


def global_norm(grads: GradientSet, names=None) -> float:
    """l2 norm over the concatenation of the named gradient arrays."""
    keys = grads.keys() if names is None else names
    total = 0.0
    for k in keys:
        g = grads[k]
        total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))
