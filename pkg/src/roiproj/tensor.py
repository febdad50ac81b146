"""Dense float32 tensors with reverse-mode automatic differentiation.

Only the operations the three-branch network needs are implemented. Each
op records a backward closure on its output; ``Tensor.backward()`` replays
the closures in reverse topological order and accumulates into ``.grad``.

Forward passes run in float32. Gradient checking re-runs the same ops in
float64 by constructing float64 tensors, so every kernel below is written
to preserve the dtype of its inputs.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import InputError, StateError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus an optional gradient buffer and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, np.ndarray):
            if dtype is not None and data.dtype != dtype:
                data = data.astype(dtype)
            elif data.dtype not in (np.float32, np.float64):
                data = data.astype(np.float32)
        else:
            data = np.asarray(data, dtype=dtype or np.float32)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(data) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

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
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        """A constant tensor sharing this tensor's values, cut from the graph."""
        return Tensor(self.data)

    def backward(self):
        """Populate ``.grad`` of every tensor this scalar depends on."""
        if self.size != 1:
            raise InputError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise StateError(
                "backward() called without a recorded forward pass; "
                "the loss does not depend on any parameter"
            )
        order = self._toposort()
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def _toposort(self):
        # iterative postorder; a node is marked seen at expansion time, not
        # when pushed, or diamond-shaped graphs would finish a dependent
        # before one of its feeders and backward would read partial grads
        seen = set()
        order = []
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def reshape(self, *shape):
        return reshape(self, shape)


def parameter(data, dtype=np.float32):
    """A trainable leaf tensor with an allocated (zero) gradient buffer."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def make_op(data, parents, backward_fn, op_name):
    """Create a graph node; `backward_fn(grad)` must accumulate into parents.

    When grad recording is off, or no parent requires grad, the result is a
    plain constant and `backward_fn` is dropped.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op_name
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    b = _coerce(b, a)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return make_op(out_data, (a, b), backward, "add")


def mul(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        out_data = a.data * s

        def backward_scalar(g):
            if a.requires_grad:
                _accumulate(a, g * s)

        return make_op(out_data, (a,), backward_scalar, "mul")

    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return make_op(out_data, (a, b), backward, "mul")


def relu(x):
    mask = x.data > 0

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * mask)

    return make_op(np.where(mask, x.data, x.data.dtype.type(0)), (x,), backward, "relu")


def maximum(a, b):
    """Elementwise max; on ties the gradient routes to the first argument."""
    take_a = a.data >= b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * ~take_a, b.shape))

    return make_op(np.where(take_a, a.data, b.data), (a, b), backward, "maximum")


def reshape(x, shape):
    old = x.shape

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(old))

    return make_op(x.data.reshape(shape), (x,), backward, "reshape")


def row(x, i):
    """Select x[i] along the leading axis (keeps the remaining axes)."""
    i = int(i)

    def backward(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[i] += g

    return make_op(x.data[i], (x,), backward, "row")


def concat(tensors, axis):
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accumulate(t, piece)

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def stack(tensors, axis=0):
    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accumulate(t, np.take(g, i, axis=axis))

    return make_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward, "stack")


def tsum(x):
    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype))

    return make_op(x.data.sum(dtype=x.dtype).reshape(()), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out_data = x.data.mean(axis=axis, keepdims=keepdims, dtype=x.dtype)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            _accumulate(x, np.broadcast_to(g / count, x.shape).astype(x.dtype))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(ge / count, x.shape).astype(x.dtype))

    return make_op(out_data, (x,), backward, "mean")


# ---------------------------------------------------------------------------
# dense / convolutional kernels


def linear(x, w, b):
    """x (B, F) @ w (O, F)^T + b (O,)."""
    out_data = x.data @ w.data.T + b.data

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data)
        if w.requires_grad:
            _accumulate(w, g.T @ x.data)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return make_op(out_data, (x, w, b), backward, "linear")


def _im2col(xp, kh, kw, stride, oh, ow):
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, oh * ow)


def conv2d(x, w, b, stride=1, padding=0):
    """NCHW convolution with OIHW weights (im2col + matmul)."""
    n, c, h, wdt = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise InputError(f"conv2d channel mismatch: input {c}, weight expects {ci}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wdt + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise InputError(f"conv2d output would be empty for input {h}x{wdt}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.ascontiguousarray(_im2col(xp, kh, kw, stride, oh, ow))
    w2 = w.data.reshape(o, -1)
    out_data = (w2 @ cols).reshape(n, o, oh, ow) + b.data.reshape(1, o, 1, 1)

    def backward(g):
        g2 = g.reshape(n, o, oh * ow)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.einsum("nol,nkl->ok", g2, cols, optimize=True)
            _accumulate(w, gw.reshape(w.shape))
        if x.requires_grad:
            gcols = np.einsum("ok,nol->nkl", w2, g2, optimize=True)
            gcols = gcols.reshape(n, c, kh, kw, oh, ow)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, :, i, j]
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accumulate(x, gxp)

    return make_op(out_data, (x, w, b), backward, "conv2d")


def _pool_windows(x_data, kernel, stride):
    n, c, h, w = x_data.shape
    kh, kw = kernel
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise InputError(f"pool output would be empty for input {h}x{w}")
    sn, sc, sh, sw = x_data.strides
    view = as_strided(
        x_data,
        shape=(n, c, oh, ow, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    return view.reshape(n, c, oh, ow, kh * kw), oh, ow


def max_pool2d(x, kernel, stride):
    """Max pooling; gradient routes to the argmax cell, first in scan order on ties."""
    kh, kw = kernel
    windows, oh, ow = _pool_windows(x.data, kernel, stride)
    arg = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    n, c, h, w = x.shape

    def backward(g):
        if not x.requires_grad:
            return
        ni, ci, ohi, owi = np.indices(arg.shape, sparse=False)
        rows = ohi * stride + arg // kw
        cols = owi * stride + arg % kw
        flat = ((ni * c + ci) * h + rows) * w + cols
        gx = np.zeros(n * c * h * w, dtype=x.dtype)
        np.add.at(gx, flat.ravel(), g.ravel())
        _accumulate(x, gx.reshape(x.shape))

    return make_op(np.ascontiguousarray(out_data), (x,), backward, "max_pool2d")


def avg_pool2d(x, kernel, stride):
    kh, kw = kernel
    windows, oh, ow = _pool_windows(x.data, kernel, stride)
    out_data = windows.mean(axis=-1, dtype=x.dtype)
    inv = 1.0 / (kh * kw)

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        gs = g * x.dtype.type(inv)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gs
        _accumulate(x, gx)

    return make_op(np.ascontiguousarray(out_data), (x,), backward, "avg_pool2d")


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy; gradient w.r.t. logits is softmax minus one-hot.

    ``logits`` is (N,) with an int label, or (B, N) with an int vector.
    """
    squeeze = logits.ndim == 1
    z = logits.data.reshape(1, -1) if squeeze else logits.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    bsz, n = z.shape
    if y.shape != (bsz,):
        raise InputError(f"expected {bsz} labels, got shape {y.shape}")
    if y.min() < 0 or y.max() >= n:
        raise InputError(f"label out of range [0, {n})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + z.max(axis=1, keepdims=True)
    losses = log_z[:, 0] - z[np.arange(bsz), y]
    out_data = np.asarray(losses.mean(), dtype=logits.dtype).reshape(())

    def backward(g):
        if not logits.requires_grad:
            return
        p = np.exp(z - log_z)
        p[np.arange(bsz), y] -= 1.0
        gl = (p * (g / bsz)).astype(logits.dtype)
        _accumulate(logits, gl.reshape(logits.shape))

    return make_op(out_data, (logits,), backward, "softmax_ce")


def sigmoid_cross_entropy(logits, targets):
    """Mean per-class binary cross-entropy on sigmoid(logits); targets are 0/1."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise InputError(f"targets shape {t.shape} != logits shape {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise InputError("targets must be 0 or 1")
    z = logits.data
    # stable: max(z,0) - z*t + log(1 + exp(-|z|))
    losses = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out_data = np.asarray(losses.mean(dtype=logits.dtype)).reshape(())
    count = z.size

    def backward(g):
        if not logits.requires_grad:
            return
        sig = 1.0 / (1.0 + np.exp(-z))
        _accumulate(logits, ((sig - t) * (g / count)).astype(logits.dtype))

    return make_op(out_data, (logits,), backward, "sigmoid_ce")


def softmax(z):
    """Plain-numpy softmax over the last axis (no graph)."""
    s = z - z.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))
