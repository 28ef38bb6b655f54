"""A small define-by-run reverse-mode autodiff engine over float64 arrays.

Every op that touches a tensor with ``requires_grad=True`` records a
:class:`Node` carrying a monotonically increasing sequence number. Calling
:func:`backward` collects the nodes reachable from the loss into a
:class:`Tape` and replays their backward rules in reverse recording order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import InvalidInputError, InvalidParameterError, ShapeError

_seq = itertools.count()


class Node:
    __slots__ = ("seq", "inputs", "out_id", "backward_fn", "op")

    def __init__(self, inputs, out_id, backward_fn, op):
        self.seq = next(_seq)
        self.inputs = inputs
        self.out_id = out_id
        self.backward_fn = backward_fn
        self.op = op

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """Dense float64 array that can participate in gradient recording."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    # -- introspection --------------------------------------------------
    @property
    def node(self):
        """The recorded op that produced this tensor (None for leaves)."""
        return self._node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._node = None
        return out

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs, backward_fn, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._node = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out._node = Node(tuple(inputs), id(out), backward_fn, op)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Nodes reachable from an output, ordered by recording sequence."""

    def __init__(self, nodes):
        self.nodes = sorted(nodes, key=lambda n: n.seq)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        return cls(nodes)

    def leaves(self):
        found = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.is_leaf and t.requires_grad:
                    found[id(t)] = t
        return list(found.values())

    def __len__(self):
        return len(self.nodes)

    def backward(self, out: Tensor, grad=None):
        grads = {id(out): np.ones_like(out.data) if grad is None else np.asarray(grad, dtype=np.float64)}
        for leaf in self.leaves():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        if out.is_leaf and out.requires_grad:
            out.grad = (out.grad if out.grad is not None else 0.0) + grads[id(out)]
            return
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise ShapeError(f"{node.op}: backward produced grad of shape {gi.shape} for input of shape {t.data.shape}")
                if t.is_leaf:
                    t.grad = t.grad + gi
                else:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi


def backward(loss: Tensor, wrt: Sequence[Tensor] = ()):
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``.

    Leaves passed via ``wrt`` that do not feed the loss receive a zero grad.
    """
    if loss.data.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    for t in wrt:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    Tape.from_output(loss).backward(loss)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return _record(ad / bd, (a, b), bw, "div")


def power(a, exponent: float):
    a = as_tensor(a)
    ad = a.data

    def bw(g):
        return (g * exponent * ad ** (exponent - 1),)

    return _record(ad ** exponent, (a,), bw, "pow")


def _unary(a, fn, dfn, op):
    a = as_tensor(a)
    ad = a.data
    return _record(fn(ad), (a,), lambda g: (g * dfn(ad),), op)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _record(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a):
    return _unary(a, np.log, lambda x: 1.0 / x, "log")


def sin(a):
    return _unary(a, np.sin, np.cos, "sin")


def cos(a):
    return _unary(a, np.cos, lambda x: -np.sin(x), "cos")


def sigmoid(a):
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index):
    a = as_tensor(a)
    shape = a.shape

    basic = isinstance(index, (int, np.integer, slice)) or (
        isinstance(index, tuple) and all(isinstance(i, (int, np.integer, slice)) for i in index))

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _record(np.array(a.data[index]), (a,), bw, "getitem")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


# ---------------------------------------------------------------------------
# Layer ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _record(ad @ bd, (a, b), bw, "matmul")


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of ``x[N,C,H,W]`` with ``kernel[O,C,kh,kw]``; no bias."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} (padding={padding})")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    kflat = kernel.data.reshape(o, -1)
    out = (cols @ kflat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gflat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gflat @ kflat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _record(np.ascontiguousarray(out), (x, kernel), bw, "conv2d")


def avg_pool2d(x, window, stride=None):
    x = as_tensor(x)
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects N×C×H×W input, got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"avg_pool2d: window {window} exceeds input {x.shape}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    area = float(window * window)
    out = np.zeros((n, c, ho, wo))
    for i in range(window):
        for j in range(window):
            out += x.data[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    out /= area

    def bw(g):
        gx = np.zeros(x.shape)
        share = g / area
        for i in range(window):
            for j in range(window):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
        return (gx,)

    return _record(out, (x,), bw, "avg_pool2d")


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(x, gamma, beta, running_stats: dict, mode="eval"):
    """Per-channel normalization; the channel axis is 1.

    ``running_stats`` holds ``mean`` and ``var`` arrays and is updated in
    place (momentum 0.1) in train mode.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if mode not in ("train", "eval"):
        raise InvalidParameterError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: gamma {gamma.shape}/beta {beta.shape} do not match channels of {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if mode == "train":
        m = x.size // x.shape[1]
        if m == 0:
            raise InvalidInputError("batch_norm: empty batch in train mode")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * m / (m - 1) if m > 1 else var
        running_stats["mean"] = (1 - BN_MOMENTUM) * running_stats["mean"] + BN_MOMENTUM * mu
        running_stats["var"] = (1 - BN_MOMENTUM) * running_stats["var"] + BN_MOMENTUM * unbiased
    else:
        mu = running_stats["mean"]
        var = running_stats["var"]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if mode == "train":
                gx = (gxhat - gxhat.mean(axis=axes, keepdims=True)
                      - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)) * inv_std.reshape(bshape)
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bw, "batch_norm")


def dropout_mask(shape, p: float, rng: np.random.Generator, training=True) -> Tensor:
    """Inverted-dropout mask: Bernoulli(1-p) scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise InvalidParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return Tensor(np.ones(shape))
    keep = rng.random(shape) >= p
    return Tensor(keep / (1.0 - p))


def cross_entropy(logits, labels):
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if n and (labels.min() < 0 or labels.max() >= k):
        raise InvalidInputError(f"cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsumexp - z[rows, labels])

    def bw(g):
        soft = np.exp(z - logsumexp[:, None])
        soft[rows, labels] -= 1.0
        return (g * soft / n,)

    return _record(np.asarray(loss), (logits,), bw, "cross_entropy")


def custom_grad(forward_fn: Callable, backward_fn: Callable, name="custom"):
    """Register an op whose backward ignores the true derivative of ``forward_fn``.

    ``forward_fn(*arrays) -> array`` and ``backward_fn(saved_arrays, grad_out)
    -> tuple of arrays`` (one per input, ``None`` allowed).
    """

    def op(*inputs):
        inputs = tuple(as_tensor(t) for t in inputs)
        saved = tuple(t.data for t in inputs)
        out = np.asarray(forward_fn(*saved), dtype=np.float64)

        def bw(g):
            grads = backward_fn(saved, g)
            if not isinstance(grads, tuple):
                grads = (grads,)
            if len(grads) != len(inputs):
                raise ShapeError(f"{name}: backward returned {len(grads)} grads for {len(inputs)} inputs")
            fixed = []
            for t, gi in zip(inputs, grads):
                if gi is None:
                    fixed.append(None)
                    continue
                gi = np.asarray(gi, dtype=np.float64)
                if gi.shape != t.shape:
                    try:
                        gi = _unbroadcast(np.broadcast_to(gi, g.shape), t.shape)
                    except ValueError:
                        raise ShapeError(f"{name}: grad shape {gi.shape} does not match input {t.shape}") from None
                    if gi.shape != t.shape:
                        raise ShapeError(f"{name}: grad shape {gi.shape} does not match input {t.shape}")
                fixed.append(gi)
            return tuple(fixed)

        return _record(out, inputs, bw, name)

    op.__name__ = name
    return op
