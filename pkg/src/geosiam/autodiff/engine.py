"""Tape-free reverse-mode autodiff over numpy arrays.

Every op returns a new :class:`Tensor` holding references to its parents and
a closure that pushes the output gradient back to them.  Arrays are stored
as float32 by default; float64 inputs stay float64, which the gradient
checks rely on.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GraphError(RuntimeError):
    pass


def _as_array(x, dtype=None):
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, _op=""):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self._op or 'leaf'})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise GraphError(f"gradient shape {g.shape} does not match {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from this scalar; leaf gradients accumulate in ``.grad``."""
        if self.data.size != 1:
            raise GraphError("backward() needs a scalar loss")
        if self._consumed:
            raise GraphError("graph already consumed by an earlier backward()")
        if self._backward is None and not self._parents:
            raise GraphError("tensor was not produced by a recorded forward pass")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node._accumulate(g)
                continue
            if g is None or not node.requires_grad:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
            node._consumed = True
        self._consumed = True

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    _check_finite(data, op)
    return Tensor(data, _parents=tuple(parents), _backward=backward, _op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0, dtype=np.float64)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True, dtype=np.float64)
    return g


def _out_dtype(*ts):
    return np.result_type(*[t.data.dtype for t in ts])


# -- elementwise and reductions ---------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = (a.data + b.data).astype(_out_dtype(a, b), copy=False)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = (a.data * b.data).astype(_out_dtype(a, b), copy=False)
    return _make(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def tabs(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def tsum(a, axis=None):
    out = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None):
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, idx):
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward, "getitem")


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    dt = _out_dtype(a, b)
    out = (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(dt)

    def backward(g):
        g64 = g.astype(np.float64)
        return (g64 @ b.data.astype(np.float64).T, a.data.astype(np.float64).T @ g64)

    return _make(out, (a, b), backward, "matmul")


# -- layers ------------------------------------------------------------------


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def dense(x, w, b=None):
    """``x @ w + b`` for ``x`` of shape (N, in) and ``w`` of shape (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense: input width {x.shape[-1]} vs weight {w.shape}")
    out = matmul(x, w)
    return out if b is None else add(out, b)


def _pad_amount(k):
    return (k - 1) // 2


def _im2col(xp, kh, kw, stride):
    """Rows are output pixels (n, y, x), columns are (channel, ki, kj)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def conv2d(x, w, b=None, stride: int = 1):
    """2D cross-correlation, NCHW input, OIkk kernel, zero 'same' padding.

    With odd ``k`` and stride ``s`` the output is ``ceil(H / s)`` by ``ceil(W / s)``.
    Computed in the operands' common dtype; bias gradients accumulate in float64.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW kernel")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ci}")
    ph, pw = _pad_amount(kh), _pad_amount(kw)
    dt = _out_dtype(x, w)
    xp = np.pad(x.data.astype(dt, copy=False), ((0, 0), (0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw)))
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.astype(dt, copy=False).reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        out = out + b.data.astype(dt)[None, :, None, None]

    def backward(g):
        g = g.astype(dt, copy=False)
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            # input gradient = stride-1 correlation of the dilated, padded
            # output gradient with the spatially flipped, transposed kernel
            hd, wdd = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            gd = np.zeros((n, o, h + kh - 1, wd + kw - 1), dtype=dt)
            top, left = kh - 1 - ph, kw - 1 - pw
            gd[:, :, top:top + hd:stride, left:left + wdd:stride] = g
            gcols, _, _ = _im2col(gd, kh, kw, 1)
            wflip = w.data.astype(dt, copy=False)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx = (gcols @ wflip.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0, dtype=np.float64))
        return tuple(grads)

    return _make(out.astype(dt), parents, backward, "conv2d")


def maxpool2(x):
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {(h, w)}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), backward, "maxpool2")


def global_avg_pool(x):
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape),), "gap")


def upsample2(x):
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape
    return _make(
        out, (x,),
        lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5), dtype=np.float64),),
        "upsample2",
    )


def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1).astype(_out_dtype(a, b), copy=False)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits.astype(np.float64) - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_ce_loss(logits, labels):
    """Mean cross-entropy; class axis 1, ``labels`` has the remaining shape."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:1] + logits.shape[2:] != labels.shape:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    p = softmax(logits.data, axis=1)
    picked = np.take_along_axis(p, labels[:, None], axis=1)[:, 0]
    count = labels.size
    out = np.asarray(-np.log(np.maximum(picked, 1e-300)).sum() / count, dtype=logits.dtype)

    def backward(g):
        d = p.copy()
        onehot = np.zeros_like(d)
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        return ((d - onehot) * (g / count),)

    return _make(out, (logits,), backward, "softmax_ce")
